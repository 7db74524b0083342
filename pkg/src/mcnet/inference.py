"""Alternating joint inference of gaze and action."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import SIGMA_REFERENCE_WIDTH, ClipSample, GazePoint, collate
from .errors import ConfigError, InputError, StateError
from .metrics import CameraModel, angular_error, predict_points


@dataclass(frozen=True)
class InferenceConfig:
    e_threshold: float = 0.1
    max_iter: int = 10
    flip_average: bool = False
    fov_deg: float = 60.0

    def __post_init__(self):
        if self.e_threshold <= 0:
            raise ConfigError("convergence threshold must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")

    @classmethod
    def scaled(cls, width: int, **kw) -> "InferenceConfig":
        """Threshold rescaled from the 224 px reference width to ``width``.

        One pixel subtends more angle in a small image, so a fixed 0.1 degree
        bound would demand sub-pixel agreement at toy resolution.
        """
        return cls(e_threshold=0.1 * SIGMA_REFERENCE_WIDTH / width, **kw)


@dataclass
class IterationRecord:
    iter_idx: int
    e: float
    l: list[float]
    points: list[tuple[int, int]]


@dataclass
class InferenceTrace:
    initial_points: list[tuple[int, int]]
    iterations: list[IterationRecord] = field(default_factory=list)
    terminated_by: str = "max_iter"

    @property
    def n_iter(self) -> int:
        return len(self.iterations)

    def to_text(self) -> str:
        def pts(p):
            return ";".join(f"{x},{y}" for x, y in p)

        lines = [f"init points={pts(self.initial_points)}"]
        for rec in self.iterations:
            probs = ",".join(repr(float(v)) for v in rec.l)
            lines.append(f"iter {rec.iter_idx} e={rec.e!r} points={pts(rec.points)} l={probs}")
        lines.append(f"end terminated_by={self.terminated_by}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "InferenceTrace":
        def pts(s):
            return [tuple(int(v) for v in p.split(",")) for p in s.split(";") if p]

        trace = None
        for line in text.strip().splitlines():
            head, *rest = line.split(" ")
            kv = dict(item.split("=", 1) for item in rest if "=" in item)
            if head == "init":
                trace = cls(initial_points=pts(kv["points"]))
            elif head == "iter":
                trace.iterations.append(
                    IterationRecord(
                        iter_idx=int(rest[0]),
                        e=float(kv["e"]),
                        l=[float(v) for v in kv["l"].split(",")],
                        points=pts(kv["points"]),
                    )
                )
            elif head == "end":
                trace.terminated_by = kv["terminated_by"]
        if trace is None:
            raise InputError("empty trace record")
        return trace


def replay_errors(trace: InferenceTrace, cam: CameraModel) -> list[float]:
    """Recompute each iteration's change from the stored gaze points."""
    out = []
    prev = np.array(trace.initial_points, float)
    for rec in trace.iterations:
        cur = np.array(rec.points, float)
        out.append(float(np.mean(angular_error(prev[:, 0], prev[:, 1], cur[:, 0], cur[:, 1], cam))))
        prev = cur
    return out


def predict_gaze_point(G) -> list[GazePoint]:
    """Argmax pixel of every frame; ties go to the smallest row-major index."""
    if isinstance(G, torch.Tensor):
        G = G.detach().cpu().numpy()
    return predict_points(G)


def _argmax_xy(G: torch.Tensor) -> torch.Tensor:
    # (B, N, H, W) -> (B, N, 2) integer (x, y)
    b, n, h, w = G.shape
    idx = torch.argmax(G.reshape(b, n, h * w), dim=-1)
    return torch.stack([idx % w, idx // w], dim=-1)


@dataclass
class JointResult:
    G: np.ndarray
    l: np.ndarray
    trace: InferenceTrace
    G_s: np.ndarray
    G_a: np.ndarray
    mirror_trace: InferenceTrace | None = None


def _alternate(model, feats, G_s, cfg: InferenceConfig, cam: CameraModel):
    b = feats.shape[0]
    G = G_s.clone()
    G_a = torch.zeros_like(G_s)
    L = torch.full((b, model.cfg.n_classes), 1.0 / model.cfg.n_classes, dtype=G_s.dtype)
    pts = _argmax_xy(G)
    traces = [InferenceTrace(initial_points=[tuple(p) for p in pts[i].tolist()]) for i in range(b)]
    active = torch.ones(b, dtype=torch.bool)
    for it in range(1, cfg.max_iter + 1):
        idx = torch.nonzero(active).flatten()
        if idx.numel() == 0:
            break
        f = feats[idx]
        l = torch.softmax(model.action_logits(f, model.gaze_cells(G[idx])), dim=-1)
        g_a = torch.sigmoid(model.action_gaze_logits(f, l))
        g_new = torch.sigmoid(model.fusion_logits(G_s[idx], g_a))
        old_pts, new_pts = pts[idx], _argmax_xy(g_new)
        errs = angular_error(
            old_pts[..., 0].numpy(), old_pts[..., 1].numpy(),
            new_pts[..., 0].numpy(), new_pts[..., 1].numpy(), cam,
        ).mean(axis=1)
        G[idx], G_a[idx], L[idx], pts[idx] = g_new, g_a, l, new_pts
        for j, i in enumerate(idx.tolist()):
            traces[i].iterations.append(
                IterationRecord(it, float(errs[j]), l[j].tolist(), [tuple(p) for p in new_pts[j].tolist()])
            )
            if errs[j] <= cfg.e_threshold:
                traces[i].terminated_by = "converged"
                active[i] = False
    return G, L, G_a, traces


def _mirror(rgb: torch.Tensor, flow: torch.Tensor):
    flow = flow.flip(-1).clone()
    flow[:, 0] = 255.0 - flow[:, 0]
    return rgb.flip(-1), flow


def infer_batch(model, samples: list[ClipSample], cfg: InferenceConfig) -> list[JointResult]:
    """Alternating inference for a batch of preprocessed clips."""
    if not getattr(model, "ready", False):
        raise StateError("model parameters are not loaded")
    batch = collate(samples)
    h, w = samples[0].size
    cam = CameraModel(w, h, cfg.fov_deg)
    model.eval()
    with torch.no_grad():
        def run(rgb, flow):
            feats = model.features(rgb, flow)
            g_s = torch.sigmoid(model.saliency_logits(feats))
            G, L, G_a, traces = _alternate(model, feats, g_s, cfg, cam)
            return G, L, g_s, G_a, traces

        G, L, G_s, G_a, traces = run(batch["rgb"], batch["flow"])
        mirror_traces = [None] * len(samples)
        if cfg.flip_average:
            Gm, Lm, G_sm, G_am, mirror_traces = run(*_mirror(batch["rgb"], batch["flow"]))
            G = 0.5 * (G + Gm.flip(-1))
            G_s = 0.5 * (G_s + G_sm.flip(-1))
            G_a = 0.5 * (G_a + G_am.flip(-1))
            L = 0.5 * (L + Lm)
    return [
        JointResult(G[i].numpy(), L[i].numpy(), traces[i], G_s[i].numpy(), G_a[i].numpy(), mirror_traces[i])
        for i in range(len(samples))
    ]


def joint_infer(clip: ClipSample, model, cfg: InferenceConfig | None = None):
    """Run the alternating procedure on one clip; returns ``(G, l, trace)``."""
    cfg = cfg or InferenceConfig()
    res = infer_batch(model, [clip], cfg)[0]
    return res.G, res.l, res.trace
