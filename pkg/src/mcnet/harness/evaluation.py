"""Evaluation of the full model and its ablation variants on a clip set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..action_head import center_cells
from ..core import ClipSample, augment_sample, collate
from ..errors import ConfigError, StateError
from ..inference import InferenceConfig, infer_batch, replay_errors
from ..metrics import CameraModel, accuracy, angular_error, frame_aucs, predict_points

GAZE_VARIANTS = ("saliency", "action", "action_gt", "full")
ACTION_VARIANTS = ("full", "wo_gaze", "center_bias", "gaze_region", "soft_gaze")
VARIANTS = ("saliency", "action", "action_gt", "full", "wo_gaze", "center_bias", "gaze_region", "soft_gaze")

ALIASES = {
    "saliency-based": "saliency",
    "action-based": "action",
    "action-based*": "action_gt",
    "mcn": "full",
    "ours": "full",
    "w/o gaze": "wo_gaze",
    "without gaze": "wo_gaze",
    "center bias": "center_bias",
    "gaze region": "gaze_region",
    "soft gaze": "soft_gaze",
}

# the classifier head each action variant reads
_HEADS = {"wo_gaze": "global", "gaze_region": "gaze_region", "soft_gaze": "soft_gaze"}


def resolve_variant(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key.replace("-", "_").replace(" ", "_"))
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    return key


def resolve_variants(names) -> list[str]:
    if not names:
        return list(VARIANTS)
    out = []
    for n in names:
        v = resolve_variant(n)
        if v not in out:
            out.append(v)
    return out


@dataclass
class ClipResult:
    clip_id: str
    label: int
    points: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    # per valid frame, so dataset means pool frames rather than clips
    aae: dict[str, list[float]] = field(default_factory=dict)
    auc: dict[str, list[float]] = field(default_factory=dict)
    pred: dict[str, int] = field(default_factory=dict)
    trace: str = ""
    n_iter: int = 0
    converged: bool = False
    replay_gap: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "ClipResult":
        return cls(
            clip_id=d["clip_id"],
            label=d["label"],
            points={k: [tuple(p) for p in v] for k, v in d["points"].items()},
            aae=d["aae"],
            auc=d["auc"],
            pred=d["pred"],
            n_iter=d["n_iter"],
            converged=d["converged"],
        )

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "label": self.label,
            "points": {k: [list(p) for p in v] for k, v in self.points.items()},
            "aae": self.aae,
            "auc": self.auc,
            "pred": self.pred,
            "n_iter": self.n_iter,
            "converged": self.converged,
        }


@dataclass
class EvalReport:
    variants: dict[str, dict[str, float]]
    trace_stats: dict[str, float]
    n_clips: int
    settings: dict
    clips: list[ClipResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "variants": self.variants,
            "trace_stats": self.trace_stats,
            "n_clips": self.n_clips,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["variants"], d["trace_stats"], d["n_clips"], d["settings"])

    def table(self) -> str:
        return format_table(self.variants)

    def write(self, out_dir, heatmaps: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        (out / "report.txt").write_text(self.table())
        with open(out / "clips.jsonl", "w") as fh:
            for c in self.clips:
                fh.write(json.dumps(c.to_dict(), sort_keys=True) + "\n")
        traces = out / "traces"
        traces.mkdir(exist_ok=True)
        for c in self.clips:
            (traces / f"{c.clip_id}.txt").write_text(c.trace)
        return out


def load_dump(path) -> list[ClipResult]:
    with open(path) as fh:
        return [ClipResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def format_table(variants: dict[str, dict[str, float]]) -> str:
    cols = ("aae", "auc", "acc_inst", "acc_cls")
    lines = [f"{'variant':<12} " + " ".join(f"{c:>9}" for c in cols)]
    for name in VARIANTS:
        if name not in variants:
            continue
        row = variants[name]
        cells = [f"{row[c]:9.4f}" if c in row else f"{'-':>9}" for c in cols]
        lines.append(f"{name:<12} " + " ".join(cells))
    return "\n".join(lines) + "\n"


def prepare_clips(samples, model_cfg) -> list[ClipSample]:
    """Deterministic test-time transform: resize then centre crop."""
    return [augment_sample(s, None, False, model_cfg.resize, model_cfg.crop) for s in samples]


def _gaze_scores(G: np.ndarray, sample: ClipSample, cam: CameraModel):
    pts = predict_points(G)
    xy = np.array([(p.x, p.y) for p in pts], float)
    v = sample.valid
    points = [tuple(int(c) for c in p) for p in xy]
    if not v.any():
        return points, [], []
    errs = angular_error(xy[v, 0], xy[v, 1], sample.gaze[v, 0], sample.gaze[v, 1], cam)
    return points, [float(e) for e in errs], [float(a) for a in frame_aucs(G, sample.gaze, v)]


def run_eval(
    model,
    samples: list[ClipSample],
    variants=None,
    infer_cfg: InferenceConfig | None = None,
    batch_size: int = 16,
    prepared: bool = False,
    fingerprint: str | None = None,
) -> EvalReport:
    """Score every requested variant. Gaze variants get AAE/AUC, action variants accuracy."""
    if not getattr(model, "ready", False):
        raise StateError("model parameters are not loaded")
    variants = resolve_variants(variants)
    for v in variants:
        head = _HEADS.get(v)
        if head is not None and head not in model.variants:
            raise ConfigError(f"variant {v!r} needs a model trained with ablation heads")
    cfg = model.cfg
    clips = samples if prepared else prepare_clips(samples, cfg)
    infer_cfg = infer_cfg or InferenceConfig.scaled(cfg.width)
    cam = CameraModel(cfg.width, cfg.height, infer_cfg.fov_deg)
    results: list[ClipResult] = []
    model.eval()
    for start in range(0, len(clips), batch_size):
        chunk = clips[start : start + batch_size]
        joint = infer_batch(model, chunk, infer_cfg)
        batch = collate(chunk)
        with torch.no_grad():
            feats = model.features(batch["rgb"], batch["flow"])
            G = torch.from_numpy(np.stack([j.G for j in joint]))
            extra_maps, extra_preds = {}, {}
            if "action_gt" in variants:
                onehot = torch.nn.functional.one_hot(batch["label"], cfg.n_classes).to(feats.dtype)
                extra_maps["action_gt"] = torch.sigmoid(model.action_gaze_logits(feats, onehot)).numpy()
            if "center_bias" in variants:
                cells = center_cells(len(chunk), model.grid)
                extra_preds["center_bias"] = model.action_logits(feats, cells).argmax(-1).tolist()
            for v, head in _HEADS.items():
                if v in variants:
                    extra_preds[v] = model.variant_logits(head, feats, G).argmax(-1).tolist()
        for i, (s, j) in enumerate(zip(chunk, joint)):
            r = ClipResult(clip_id=s.clip_id, label=int(s.action_id))
            maps = {"saliency": j.G_s, "action": j.G_a, "full": j.G}
            maps.update({k: v[i] for k, v in extra_maps.items()})
            for v in variants:
                if v in GAZE_VARIANTS:
                    r.points[v], r.aae[v], r.auc[v] = _gaze_scores(maps[v], s, cam)
                if v == "full":
                    r.pred[v] = int(np.argmax(j.l))
                elif v in extra_preds:
                    r.pred[v] = int(extra_preds[v][i])
            r.trace = j.trace.to_text()
            r.n_iter = j.trace.n_iter
            r.converged = j.trace.terminated_by == "converged"
            replay = replay_errors(j.trace, cam)
            r.replay_gap = max((abs(a - b.e) for a, b in zip(replay, j.trace.iterations)), default=0.0)
            results.append(r)

    table = summarize(results, variants, cfg.n_classes)
    iters = np.array([r.n_iter for r in results])
    stats = {
        "mean_iter": float(iters.mean()),
        "max_iter": int(iters.max()),
        "iter_histogram": {str(k): int(c) for k, c in zip(*np.unique(iters, return_counts=True))},
        "converged": float(np.mean([r.converged for r in results])),
        "converged_within_3": float(np.mean([r.converged and r.n_iter <= 3 for r in results])),
        "max_replay_gap": float(max(r.replay_gap for r in results)),
    }
    settings = {
        "e_threshold": infer_cfg.e_threshold,
        "max_iter": infer_cfg.max_iter,
        "flip_average": infer_cfg.flip_average,
        "fov_deg": infer_cfg.fov_deg,
        "variants": variants,
        "dataset_fingerprint": fingerprint,
        "model": cfg.to_dict(),
    }
    return EvalReport(table, stats, len(results), settings, results)


def summarize(results, variants, n_classes: int) -> dict[str, dict[str, float]]:
    """Variant table from per-clip results; also used to re-check a stored dump."""
    table = {}
    labels = [r.label for r in results]
    for v in variants:
        row = {}
        if v in GAZE_VARIANTS:
            a = [e for r in results for e in r.aae[v]]
            u = [e for r in results for e in r.auc[v]]
            row["aae"] = float(np.mean(a)) if a else float("nan")
            row["auc"] = float(np.mean(u)) if u else float("nan")
        if v in ACTION_VARIANTS:
            inst, cls = accuracy([r.pred[v] for r in results], labels, n_classes)
            row["acc_inst"], row["acc_cls"] = inst, cls
        table[v] = row
    return table


def heatmap_overlay(frame: np.ndarray, G: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a [0, 1] map, colour-mapped, onto an RGB frame in [0, 1]; returns uint8."""
    from matplotlib import colormaps

    g = G - G.min()
    if g.max() > 0:
        g = g / g.max()
    color = colormaps["jet"](g)[..., :3]
    out = (1 - alpha) * frame + alpha * color
    return (np.clip(out, 0, 1) * 255).round().astype(np.uint8)


def save_overlays(sample: ClipSample, G: np.ndarray, out_dir, tag: str = "full") -> list[Path]:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in range(G.shape[0]):
        p = out / f"{sample.clip_id}_{tag}_{f:03d}.png"
        Image.fromarray(heatmap_overlay(sample.rgb[f], G[f])).save(p)
        paths.append(p)
    return paths
