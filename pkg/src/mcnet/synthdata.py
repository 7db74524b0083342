"""Synthetic "toy kitchen" clips with action-dependent gaze, and dataset I/O.

Scene layout: the four image quadrants hold the manipulated object (a coloured
disk), distractor disks of other colours drawn with higher contrast, and a
context cue square. The action class is (verb, noun): the noun is the
manipulated object's colour, the verb combines the object's motion pattern
(horizontal or vertical oscillation) with the cue's texture (solid or
checkered). Gaze follows the manipulated object. Nothing local marks which
disk that is: the cue square is painted in the object's colour, and the cue
never shares a quadrant with a disk. Finding the fixated disk therefore needs
either the clip-level context or the action label.

On-disk layout::

    <root>/index.tsv          clip_id, split, action_id, n_frames
    <root>/synth.cfg          generator settings, key=value
    <root>/<clip_id>/frames/%05d.png
    <root>/<clip_id>/flow/%05d.npyish   raw float32 flow, see write_flow
    <root>/<clip_id>/gaze.csv frame_idx,x,y,valid
    <root>/<clip_id>/objects.json       rendered object tracks (for oracles)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import format_kv, parse_kv
from .core import ClipSample, preprocess_flow
from .errors import GenerationError, IntegrityError, InputError, NotFoundError

FLOW_MAGIC = b"MCNF"

NOUN_COLORS = [
    (0.85, 0.15, 0.15),
    (0.15, 0.70, 0.20),
    (0.15, 0.30, 0.90),
    (0.90, 0.80, 0.10),
    (0.75, 0.20, 0.80),
    (0.10, 0.80, 0.80),
    (0.95, 0.55, 0.10),
    (0.55, 0.35, 0.15),
]
CUE_BACKING = 0.1
BACKGROUND = 0.5


@dataclass(frozen=True)
class SynthSpec:
    n_verbs: int = 4
    n_nouns: int = 5
    frames: int = 8
    size: int = 64
    n_distractors: int = 2
    distractor_salience: float = 1.25
    min_contrast: float = 0.55
    gaze_jitter: float = 1.0
    motion: float = 1.5
    blob_radius: float = 7.0
    clips_per_class: int = 40
    test_fraction: float = 0.25
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise InputError("need at least two action classes")
        if self.n_distractors < 1:
            raise InputError("need at least one distractor")
        if self.n_nouns > len(NOUN_COLORS):
            raise InputError(f"at most {len(NOUN_COLORS)} nouns supported")
        if self.gaze_jitter >= self.size / 4:
            raise InputError("gaze jitter must stay below a quarter of the frame size")
        if not 0 < self.min_contrast <= 1:
            raise InputError("min_contrast must lie in (0, 1]")
        if self.distractor_salience < 1:
            raise InputError("distractors must be at least as salient as the target")
        if not 0 <= self.test_fraction < 1:
            raise InputError("test_fraction must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return self.n_verbs * self.n_nouns

    def class_of(self, verb: int, noun: int) -> int:
        return verb * self.n_nouns + noun

    def verb_noun(self, action_id: int) -> tuple[int, int]:
        return divmod(action_id, self.n_nouns)

    @staticmethod
    def motion_type(verb: int) -> int:
        return verb % 2

    @staticmethod
    def context_type(verb: int) -> int:
        return verb // 2

    def to_text(self) -> str:
        return format_kv(dataclasses.asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        raw = parse_kv(text)
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in raw:
                kw[f.name] = (float if f.type == "float" else int)(raw.pop(f.name))
        if raw:
            raise InputError(f"unknown synth settings: {sorted(raw)}")
        return cls(**kw)


# -- flow container --------------------------------------------------------------


def write_flow(path: Path, flow: np.ndarray) -> None:
    """16-byte header (b"MCNF", u32 N, H, W, little-endian), then float32 N*H*W*2."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim == 3:
        flow = flow[None]
    n, h, w, c = flow.shape
    if c != 2:
        raise InputError("flow must have two components")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<III", n, h, w))
        fh.write(flow.tobytes())


def read_flow(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FLOW_MAGIC:
        raise IntegrityError(f"{path}: not a flow container")
    n, h, w = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != n * h * w * 2:
        raise IntegrityError(f"{path}: payload size does not match header {n}x{h}x{w}")
    return body.reshape(n, h, w, 2).astype(np.float32)


# -- rendering -------------------------------------------------------------------


def _disk(xx, yy, cx, cy, r):
    # anti-aliased coverage in [0, 1]
    return np.clip(r - np.hypot(xx - cx, yy - cy) + 0.5, 0.0, 1.0)


def _cue_pattern(kind: int, xx, yy) -> np.ndarray:
    # 1 where the cue shows its colour, 0 where it shows the dark backing
    if kind == 0:
        return np.ones(xx.shape)
    if kind == 1:
        return (((xx // 2 + yy // 2) % 2) == 0).astype(float)
    period = kind + 1
    return ((yy // period) % 2 == 0).astype(float)


def _oscillation(kind: int, f: int, n: int, amp: float) -> tuple[float, float]:
    d = amp * math.sin(2 * math.pi * f / n)
    return (d, 0.0) if kind == 0 else (0.0, d)


def render_clip(spec: SynthSpec, action_id: int, rng: np.random.Generator):
    """Render one clip. Returns (rgb uint8 (N,H,W,3), raw flow, gaze (N,2), objects)."""
    n, size = spec.frames, spec.size
    verb, noun = spec.verb_noun(action_id)
    # quadrant slot centres, pushed towards the corners
    inset = size * 3 / 16
    slots = [(inset, inset), (size - inset, inset), (inset, size - inset), (size - inset, size - inset)]
    roles = ["target", "cue"] + ["distractor"] * spec.n_distractors
    if len(roles) > len(slots):
        raise GenerationError(f"{len(roles)} objects do not fit into {len(slots)} slots")
    order = rng.permutation(len(slots))
    amp = spec.motion * n / (2 * math.pi)
    rad = spec.blob_radius

    others = [k for k in range(spec.n_nouns) if k != noun]
    distractor_nouns = rng.choice(others, size=spec.n_distractors, replace=len(others) < spec.n_distractors)
    # per-clip contrast, so absolute colour does not single out the target
    contrast = rng.uniform(spec.min_contrast, 1.0)
    objects = []
    for role, slot in zip(roles, order):
        cx, cy = slots[slot]
        cx += rng.uniform(-1.5, 1.5)
        cy += rng.uniform(-1.5, 1.5)
        obj = {"role": role, "base": (cx, cy), "radius": rad}
        if role == "target":
            obj.update(noun=int(noun), motion=spec.motion_type(verb), contrast=contrast)
        elif role == "distractor":
            obj.update(noun=int(distractor_nouns[len([o for o in objects if o["role"] == "distractor"])]),
                       motion=int(rng.integers(0, 2)), contrast=contrast * spec.distractor_salience)
        elif role == "cue":
            obj.update(noun=int(noun), kind=spec.context_type(verb), motion=None)
        objects.append(obj)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    texture = BACKGROUND + 0.04 * np.sin(xx * rng.uniform(0.2, 0.4) + rng.uniform(0, 6)) * np.cos(
        yy * rng.uniform(0.2, 0.4) + rng.uniform(0, 6)
    )
    rgb = np.empty((n, size, size, 3))
    flow = np.zeros((n, size, size, 2), dtype=np.float32)
    gaze = np.zeros((n, 2))
    for o in objects:
        o["centers"] = []

    jitter = rng.normal(0.0, spec.gaze_jitter, size=(n, 2))
    # fixations stay on the object: clip the offset at two standard deviations
    norm = np.hypot(jitter[:, 0], jitter[:, 1])
    cap = 2 * spec.gaze_jitter
    scale = np.where(norm > cap, cap / np.maximum(norm, 1e-12), 1.0)
    jitter *= scale[:, None]

    for f in range(n):
        img = np.repeat(texture[..., None], 3, axis=-1)
        for o in objects:
            bx, by = o["base"]
            if o["motion"] is not None:
                dx, dy = _oscillation(o["motion"], f, n, amp)
                nx, ny = _oscillation(o["motion"], f + 1, n, amp)
                vel = (nx - dx, ny - dy)
            else:
                dx = dy = 0.0
                vel = (0.0, 0.0)
            cx, cy = bx + dx, by + dy
            o["centers"].append((cx, cy))
            if o["role"] in ("target", "distractor"):
                base = np.array(NOUN_COLORS[o["noun"]])
                color = np.clip(BACKGROUND + o["contrast"] * (base - BACKGROUND), 0, 1)
                m = _disk(xx, yy, cx, cy, rad)
                img = img * (1 - m[..., None]) + m[..., None] * color
                flow[f][m > 0.5] = vel
            else:
                side = rad - 1
                m = ((np.abs(xx - cx) <= side) & (np.abs(yy - cy) <= side)).astype(float)
                pat = _cue_pattern(o["kind"], xx.astype(int), yy.astype(int))[..., None]
                fill = pat * np.array(NOUN_COLORS[o["noun"]]) + (1 - pat) * CUE_BACKING
                img = img * (1 - m[..., None]) + m[..., None] * fill
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        rgb[f] = np.clip(img, 0, 1)

        fx, fy = objects[0]["centers"][f]
        gaze[f] = (fx + jitter[f, 0], fy + jitter[f, 1])

    gaze = np.clip(gaze, 0, size - 1)
    rgb8 = np.round(rgb * 255).astype(np.uint8)
    for o in objects:
        o["base"] = [float(v) for v in o["base"]]
        o["centers"] = [[float(a), float(b)] for a, b in o["centers"]]
    return rgb8, flow, gaze, objects


# -- dataset I/O -----------------------------------------------------------------


def _splits(spec: SynthSpec) -> list[str]:
    n_test = int(round(spec.clips_per_class * spec.test_fraction))
    n_train = spec.clips_per_class - n_test
    return ["train"] * n_train + ["test"] * n_test


def generate_dataset(spec: SynthSpec, root, n_clips: int | None = None) -> Path:
    """Write a full synthetic dataset under ``root``.

    Clips are assigned to classes round-robin; each clip renders from its own
    seed derived from ``spec.seed`` and the clip index.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n_clips = spec.clips_per_class * spec.n_classes if n_clips is None else n_clips
    split_of = _splits(spec)
    rows = []
    for i in range(n_clips):
        action = i % spec.n_classes
        rank = i // spec.n_classes
        split = split_of[rank % len(split_of)]
        clip_id = f"clip{i:05d}"
        rng = np.random.default_rng([spec.seed, i])
        rgb, flow, gaze, objects = render_clip(spec, action, rng)
        clip_dir = root / clip_id
        (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
        (clip_dir / "flow").mkdir(parents=True, exist_ok=True)
        for f in range(spec.frames):
            Image.fromarray(rgb[f]).save(clip_dir / "frames" / f"{f:05d}.png")
            write_flow(clip_dir / "flow" / f"{f:05d}.npyish", flow[f])
        write_gaze_csv(clip_dir / "gaze.csv", gaze, np.ones(spec.frames, bool))
        (clip_dir / "objects.json").write_text(json.dumps(objects, sort_keys=True))
        rows.append((clip_id, split, action, spec.frames))
    write_index(root / "index.tsv", rows)
    (root / "synth.cfg").write_text(spec.to_text())
    return root


def write_index(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["clip_id", "split", "action_id", "n_frames"])
        w.writerows(rows)


def write_gaze_csv(path: Path, gaze: np.ndarray, valid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_idx", "x", "y", "valid"])
        for i, ((x, y), ok) in enumerate(zip(gaze, valid)):
            w.writerow([i, repr(float(x)), repr(float(y)), int(bool(ok))])


def read_gaze_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    gaze = np.array([(float(r["x"]), float(r["y"])) for r in rows], dtype=np.float64).reshape(-1, 2)
    valid = np.array([r["valid"].strip() not in ("0", "false", "False", "") for r in rows], dtype=bool)
    return gaze, valid


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    split: str
    action_id: int
    n_frames: int
    path: Path

    def load(self) -> ClipSample:
        frame_files = sorted((self.path / "frames").glob("*.png"))
        flow_files = sorted((self.path / "flow").glob("*.npyish"))
        if len(frame_files) != self.n_frames:
            raise IntegrityError(f"{self.clip_id}: {len(frame_files)} frames, index says {self.n_frames}")
        rgb = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in frame_files]).astype(np.float32) / 255.0
        raw = np.concatenate([read_flow(p) for p in flow_files], axis=0)
        if raw.shape[0] != self.n_frames:
            raise IntegrityError(f"{self.clip_id}: {raw.shape[0]} flow frames, index says {self.n_frames}")
        gaze, valid = read_gaze_csv(self.path / "gaze.csv")
        if len(gaze) != self.n_frames:
            raise IntegrityError(f"{self.clip_id}: {len(gaze)} gaze rows, index says {self.n_frames}")
        sample = ClipSample(
            rgb=rgb, flow=preprocess_flow(raw), gaze=gaze, valid=valid,
            action_id=self.action_id, clip_id=self.clip_id,
        )
        sample.validate()
        return sample

    def objects(self) -> list[dict]:
        return json.loads((self.path / "objects.json").read_text())


class ClipDataset:
    """Sequence of clips that loads pixel data on access."""

    def __init__(self, root: Path, records: list[ClipRecord], cache: bool = True):
        self.root = root
        self.records = records
        self._cache: dict[int, ClipSample] | None = {} if cache else None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i: int) -> ClipSample:
        if self._cache is None:
            return self.records[i].load()
        if i not in self._cache:
            self._cache[i] = self.records[i].load()
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labels(self) -> list[int]:
        return [r.action_id for r in self.records]

    def spec(self) -> SynthSpec | None:
        cfg = self.root / "synth.cfg"
        return SynthSpec.from_text(cfg.read_text()) if cfg.exists() else None


def load_dataset(root, split: str | None = None, cache: bool = True) -> ClipDataset:
    """Open a dataset directory; ``split`` filters on the index's split column."""
    root = Path(root)
    index = root / "index.tsv"
    if not index.exists():
        raise NotFoundError(f"no index.tsv under {root}")
    records = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            rec = ClipRecord(
                clip_id=row["clip_id"],
                split=row["split"],
                action_id=int(row["action_id"]),
                n_frames=int(row["n_frames"]),
                path=root / row["clip_id"],
            )
            if split is not None and rec.split != split:
                continue
            frames_dir = rec.path / "frames"
            if not frames_dir.is_dir():
                raise IntegrityError(f"{rec.clip_id}: frames directory missing")
            n_found = sum(1 for _ in frames_dir.glob("*.png"))
            if n_found != rec.n_frames:
                raise IntegrityError(f"{rec.clip_id}: {n_found} frames, index says {rec.n_frames}")
            records.append(rec)
    return ClipDataset(root, records, cache=cache)


def dataset_fingerprint(root) -> str:
    """Hash of the index and every gaze file; cheap identity check for reports."""
    import hashlib

    root = Path(root)
    h = hashlib.sha256((root / "index.tsv").read_bytes())
    for p in sorted(root.glob("*/gaze.csv")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def load_clip(path) -> ClipSample:
    """Load one clip directory; the label comes from the parent's index when present, else 0."""
    path = Path(path)
    if not (path / "frames").is_dir():
        raise NotFoundError(f"{path}: not a clip directory (no frames/)")
    action_id = 0
    index = path.parent / "index.tsv"
    if index.exists():
        with open(index, newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                if row["clip_id"] == path.name:
                    action_id = int(row["action_id"])
                    break
    n_frames = sum(1 for _ in (path / "frames").glob("*.png"))
    return ClipRecord(path.name, "", action_id, n_frames, path).load()
