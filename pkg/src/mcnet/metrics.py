"""Evaluation metrics: angular error, single-fixation AUC, accuracy, affinity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import GazePoint
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera used to turn pixel positions into viewing rays."""

    width: int
    height: int
    horizontal_fov_deg: float = 60.0

    def __post_init__(self):
        if not 0 < self.horizontal_fov_deg < 180:
            raise ConfigError("horizontal FOV must lie in (0, 180) degrees")

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(math.radians(self.horizontal_fov_deg) / 2)


def angular_error(px, py, gx, gy, cam: CameraModel) -> np.ndarray:
    """Angle in degrees between the rays through (px, py) and (gx, gy). Vectorised."""
    f = cam.focal
    p = np.stack(np.broadcast_arrays(np.asarray(px, float) - cam.width / 2, np.asarray(py, float) - cam.height / 2, f), -1)
    g = np.stack(np.broadcast_arrays(np.asarray(gx, float) - cam.width / 2, np.asarray(gy, float) - cam.height / 2, f), -1)
    # atan2 form stays accurate for tiny angles where arccos does not
    cross = np.linalg.norm(np.cross(p, g), axis=-1)
    dot = np.sum(p * g, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def aae(pred: GazePoint, gt: GazePoint, cam: CameraModel) -> float:
    return float(angular_error(pred.x, pred.y, gt.x, gt.y, cam))


def mean_angular_error(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, cam: CameraModel) -> float:
    """Mean over valid frames of per-frame errors; ``pred``/``gt`` are (N, 2) (x, y)."""
    valid = np.asarray(valid, bool)
    if not valid.any():
        return float("nan")
    pred, gt = np.asarray(pred, float)[valid], np.asarray(gt, float)[valid]
    return float(np.mean(angular_error(pred[:, 0], pred[:, 1], gt[:, 0], gt[:, 1], cam)))


def _pixel(gt: GazePoint, h: int, w: int) -> tuple[int, int]:
    x = min(max(int(round(gt.x)), 0), w - 1)
    y = min(max(int(round(gt.y)), 0), h - 1)
    return x, y


def auc(saliency: np.ndarray, gt: GazePoint) -> float:
    """ROC AUC with the fixated pixel as the only positive; ties count one half."""
    saliency = np.asarray(saliency)
    h, w = saliency.shape
    x, y = _pixel(gt, h, w)
    pos = saliency[y, x]
    flat = saliency.ravel()
    n_neg = flat.size - 1
    below = np.count_nonzero(flat < pos)
    ties = np.count_nonzero(flat == pos) - 1
    return (below + 0.5 * ties) / n_neg


def frame_aucs(maps: np.ndarray, gaze: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-frame AUC for valid frames of an (N, H, W) sequence."""
    return np.array(
        [auc(m, GazePoint(i, x, y)) for i, (m, (x, y), ok) in enumerate(zip(maps, gaze, valid)) if ok]
    )


def accuracy(preds, gts, n: int | None = None) -> tuple[float, float]:
    """Instance accuracy and mean per-class recall over classes present in ``gts``."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    if preds.size == 0:
        raise InputError("accuracy of an empty prediction list")
    if preds.shape != gts.shape:
        raise InputError("predictions and labels differ in length")
    if n is not None and (preds.max() >= n or gts.max() >= n):
        raise InputError(f"class id out of range for n={n}")
    inst = float(np.mean(preds == gts))
    recalls = [np.mean(preds[gts == c] == c) for c in np.unique(gts)]
    return inst, float(np.mean(recalls))


def affinity_from_scores(M: np.ndarray) -> np.ndarray:
    """Row-wise min-max transform: the best (lowest error) entry of a row maps to 1."""
    M = np.asarray(M, float)
    lo = M.min(axis=1, keepdims=True)
    hi = M.max(axis=1, keepdims=True)
    span = hi - lo
    A = np.full_like(M, 0.5)
    ok = span[:, 0] > 0
    A[ok] = 1.0 - (M[ok] - lo[ok]) / span[ok]
    return A


@dataclass
class AffinityMatrix:
    M: np.ndarray
    A: np.ndarray
    classes: list[int]

    @property
    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.M)))

    @property
    def off_diagonal_mean(self) -> float:
        m = len(self.classes)
        return float(self.M[~np.eye(m, dtype=bool)].mean())

    def blocks(self, threshold: float = 0.8) -> list[list[int]]:
        """Groups of classes whose mutual affinities all reach ``threshold``.

        Greedy, in class order; a quick summary of the block structure.
        """
        m = len(self.classes)
        sym = np.minimum(self.A, self.A.T)
        groups, used = [], set()
        for i in range(m):
            if i in used:
                continue
            group = [i]
            for j in range(i + 1, m):
                if j not in used and all(sym[j, g] >= threshold for g in group):
                    group.append(j)
            used.update(group)
            if len(group) > 1:
                groups.append([self.classes[g] for g in group])
        return groups

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "M": self.M.tolist(),
            "A": self.A.tolist(),
            "diagonal_mean": self.diagonal_mean,
            "off_diagonal_mean": self.off_diagonal_mean,
            "blocks": self.blocks(),
        }


def affinity_matrix(model, clips, classes, fov_deg: float = 60.0, batch_size: int = 16) -> AffinityMatrix:
    """Cross-class AAE of the action-based gaze head.

    Row i feeds the one-hot label of ``classes[i]``; column j averages over the
    clips whose label is ``classes[j]``.
    """
    import torch

    from .core import collate

    by_class = {c: [s for s in clips if s.action_id == c] for c in classes}
    missing = [c for c, v in by_class.items() if not v]
    if missing:
        raise InputError(f"no evaluation clips for classes {missing}")
    m = len(classes)
    n = model.cfg.n_classes
    M = np.zeros((m, m))
    model.eval()
    with torch.no_grad():
        for j, c in enumerate(classes):
            group = by_class[c]
            sums = np.zeros(m)
            counts = np.zeros(m)
            for start in range(0, len(group), batch_size):
                chunk = group[start : start + batch_size]
                batch = collate(chunk)
                feats = model.features(batch["rgb"], batch["flow"])
                h, w = chunk[0].size
                cam = CameraModel(w, h, fov_deg)
                for i, fed in enumerate(classes):
                    l = torch.zeros(len(chunk), n)
                    l[:, fed] = 1.0
                    G_a = torch.sigmoid(model.action_gaze_logits(feats, l)).numpy()
                    for s, g in zip(chunk, G_a):
                        pts = np.array([(p.x, p.y) for p in predict_points(g)])
                        v = s.valid
                        if v.any():
                            errs = angular_error(pts[v, 0], pts[v, 1], s.gaze[v, 0], s.gaze[v, 1], cam)
                            sums[i] += errs.sum()
                            counts[i] += v.sum()
            M[:, j] = sums / counts
    return AffinityMatrix(M=M, A=affinity_from_scores(M), classes=list(classes))


def predict_points(G: np.ndarray) -> list[GazePoint]:
    """Per-frame argmax pixel of an (N, H, W) map; ties go to the first row-major index."""
    G = np.asarray(G)
    n, h, w = G.shape
    idx = np.argmax(G.reshape(n, -1), axis=1)
    return [GazePoint(i, int(k % w), int(k // w)) for i, k in enumerate(idx)]
