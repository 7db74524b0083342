"""Gaze-guided action recognition.

The gaze map is max-pooled down to the compact feature grid, the argmax cell
of each temporal slice marks the gaze region, and features are averaged
separately inside and outside a (2r+1)-wide window around it.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .core import GazePoint, ModelConfig
from .encoder import CompactBlock, init_conv
from .errors import ConfigError, InputError

MODES = ("two_way", "global", "gaze_region", "soft_gaze")


def pool_gaze_map(G: torch.Tensor, grid: tuple[int, int, int]) -> torch.Tensor:
    """Non-overlapping 3D max-pool of (B, N, H, W) maps down to (B, t', h', w')."""
    n, h, w = G.shape[-3:]
    t2, h2, w2 = grid
    if n % t2 or h % h2 or w % w2:
        raise ConfigError(f"gaze map {(n, h, w)} not divisible into grid {grid}")
    kernel = (n // t2, h // h2, w // w2)
    return F.max_pool3d(G.unsqueeze(1), kernel, stride=kernel).squeeze(1)


def argmax_cells(pooled: torch.Tensor) -> torch.Tensor:
    """(B, t, h, w) -> (B, t, 2) integer (x, y); ties go to the first row-major index."""
    b, t, h, w = pooled.shape
    flat = pooled.reshape(b, t, h * w)
    # torch.argmax returns the first maximal index, matching the tie rule
    idx = torch.argmax(flat, dim=-1)
    return torch.stack([idx % w, idx // w], dim=-1)


def extract_gaze_points(G: torch.Tensor, grid: tuple[int, int, int]) -> torch.Tensor:
    """Gaze cell per temporal slice of the compact grid, as (B, t', 2) (x, y)."""
    single = G.dim() == 3
    if single:
        G = G.unsqueeze(0)
    cells = argmax_cells(pool_gaze_map(G, grid))
    return cells[0] if single else cells


def cells_to_points(cells: torch.Tensor) -> list[GazePoint]:
    return [GazePoint(t, int(x), int(y)) for t, (x, y) in enumerate(cells.tolist())]


def center_cells(batch: int, grid: tuple[int, int, int]) -> torch.Tensor:
    t, h, w = grid
    cells = torch.tensor([w // 2, h // 2], dtype=torch.long)
    return cells.expand(batch, t, 2).clone()


def gaze_window_mask(cells: torch.Tensor, h: int, w: int, r: int) -> torch.Tensor:
    """Boolean (B, t, h, w) mask of the inclusive window, clipped to the grid."""
    rows = torch.arange(h).view(1, 1, h, 1)
    cols = torch.arange(w).view(1, 1, 1, w)
    x = cells[..., 0].unsqueeze(-1).unsqueeze(-1)
    y = cells[..., 1].unsqueeze(-1).unsqueeze(-1)
    return ((rows - y).abs() <= r) & ((cols - x).abs() <= r)


def two_way_pool(feats: torch.Tensor, cells: torch.Tensor, r: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean over the gaze window and mean over the rest, per channel and slice.

    ``feats`` is (B, c, t, h, w) (or unbatched), ``cells`` (B, t, 2) holding (x, y).
    Each mean divides by the exact number of cells in its region.
    """
    if r < 1:
        raise ConfigError("r must be >= 1")
    single = feats.dim() == 4
    if single:
        feats, cells = feats.unsqueeze(0), cells.unsqueeze(0)
    b, c, t, h, w = feats.shape
    if cells.shape != (b, t, 2):
        raise InputError(f"expected gaze cells of shape {(b, t, 2)}, got {tuple(cells.shape)}")
    if (cells[..., 0] < 0).any() or (cells[..., 0] >= w).any() or (cells[..., 1] < 0).any() or (cells[..., 1] >= h).any():
        raise InputError("gaze cell outside the feature grid")
    mask = gaze_window_mask(cells, h, w, r).to(feats.dtype)
    count_g = mask.sum(dim=(-2, -1))
    count_n = h * w - count_g
    if (count_n == 0).any():
        raise ConfigError(f"gaze window (r={r}) covers the whole {h}x{w} grid")
    # offsets from one reference cell keep v_g == v_n exact on a constant map
    ref = feats[..., :1, :1]
    d = feats - ref
    m = mask.unsqueeze(1)
    v_g = ref[..., 0, 0] + (d * m).sum(dim=(-2, -1)) / count_g.unsqueeze(1)
    v_n = ref[..., 0, 0] + (d * (1 - m)).sum(dim=(-2, -1)) / count_n.unsqueeze(1)
    if single:
        return v_g[0], v_n[0]
    return v_g, v_n


def soft_pool(feats: torch.Tensor, pooled_gaze: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Gaze-weighted spatial average; weights are the pooled map of each slice."""
    wts = pooled_gaze.unsqueeze(1)
    return (feats * wts).sum(dim=(-2, -1)) / (wts.sum(dim=(-2, -1)) + eps)


class ActionHead(nn.Module):
    """Compact block, pooling and 1x1x1 classifier layers.

    ``mode`` selects the pooling: ``two_way`` (gaze + non-gaze branches),
    ``global`` (plain average), ``gaze_region`` (gaze branch only) or
    ``soft_gaze`` (gaze-map weighted average).
    """

    def __init__(self, cfg: ModelConfig, mode: str = "two_way"):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"unknown pooling mode {mode!r}; choose from {MODES}")
        self.cfg = cfg
        self.mode = mode
        cp = cfg.compact_channels
        self.compact = CompactBlock(cfg)
        self.fc_g = nn.Conv1d(cp, cfg.s, 1)
        width = cfg.s
        if mode == "two_way":
            self.fc_n = nn.Conv1d(cp, cfg.s // 2, 1)
            width += cfg.s // 2
        self.fc_logit = nn.Conv1d(width, cfg.n_classes, 1)
        init_conv(self)

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.cfg.compact_shape[1:]

    def branch_outputs(self, v_g: torch.Tensor, v_n: torch.Tensor | None = None) -> torch.Tensor:
        parts = [F.relu(self.fc_g(v_g))]
        if self.mode == "two_way":
            parts.append(F.relu(self.fc_n(v_n)))
        return torch.cat(parts, dim=1)

    def classify_logits(self, v_g: torch.Tensor, v_n: torch.Tensor | None = None) -> torch.Tensor:
        """Temporal mean of per-slice logits: (B, c', t') -> (B, n)."""
        return self.fc_logit(self.branch_outputs(v_g, v_n)).mean(dim=-1)

    def logits(
        self,
        feats: torch.Tensor,
        cells: torch.Tensor | None = None,
        pooled_gaze: torch.Tensor | None = None,
    ) -> torch.Tensor:
        compact = self.compact(feats)
        if self.mode == "global":
            return self.classify_logits(compact.mean(dim=(-2, -1)))
        if self.mode == "soft_gaze":
            if pooled_gaze is None:
                raise InputError("soft_gaze pooling needs a pooled gaze map")
            return self.classify_logits(soft_pool(compact, pooled_gaze))
        if cells is None:
            raise InputError(f"{self.mode} pooling needs gaze cells")
        v_g, v_n = two_way_pool(compact, cells, self.cfg.r)
        if self.mode == "gaze_region":
            return self.classify_logits(v_g)
        return self.classify_logits(v_g, v_n)

    def forward(self, feats, cells=None, pooled_gaze=None) -> torch.Tensor:
        return torch.softmax(self.logits(feats, cells, pooled_gaze), dim=-1)


def classify_action(v_g: torch.Tensor, v_n: torch.Tensor, head: ActionHead) -> torch.Tensor:
    single = v_g.dim() == 2
    if single:
        v_g, v_n = v_g.unsqueeze(0), v_n.unsqueeze(0)
    l = torch.softmax(head.classify_logits(v_g, v_n), dim=-1)
    return l[0] if single else l
