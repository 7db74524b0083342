"""The full mutual context network assembled from its modules."""

from __future__ import annotations

import torch
from torch import nn

from .action_head import ActionHead, extract_gaze_points, pool_gaze_map
from .core import ModelConfig
from .encoder import Encoder
from .errors import ConfigError
from .gaze_heads import FusionHead, GazeDecoder, KernelGenerator, apply_action_kernels

# Module groups as trained/frozen by the staged schedule.
GROUPS = {
    "encoder": ("encoder",),
    "action": ("action",),
    "saliency": ("saliency_decoder",),
    "action_gaze": ("kernel_gen", "action_decoder"),
    "fusion": ("fusion",),
    "variants": ("variants",),
}

VARIANT_MODES = ("global", "gaze_region", "soft_gaze")


class MCN(nn.Module):
    def __init__(self, cfg: ModelConfig, with_variants: bool = True):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.action = ActionHead(cfg, "two_way")
        self.saliency_decoder = GazeDecoder(cfg.feature_channels, cfg)
        self.kernel_gen = KernelGenerator(cfg)
        self.action_decoder = GazeDecoder(cfg.k, cfg)
        self.fusion = FusionHead(cfg)
        # Ablation classifier heads. They read detached features so they
        # never influence the main model.
        self.variants = nn.ModuleDict(
            {m: ActionHead(cfg, m) for m in VARIANT_MODES} if with_variants else {}
        )
        # Set once parameters come from training or a checkpoint.
        self.ready = False

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.cfg.compact_shape[1:]

    def group_parameters(self, group: str):
        if group not in GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        for name in GROUPS[group]:
            yield from getattr(self, name).parameters()

    def features(self, rgb: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        return self.encoder(rgb, flow)

    def saliency_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.saliency_decoder.logits(feats)

    def action_logits(self, feats: torch.Tensor, cells: torch.Tensor) -> torch.Tensor:
        return self.action.logits(feats, cells)

    def action_gaze_logits(self, feats: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        kernels = self.kernel_gen(l)
        return self.action_decoder.logits(apply_action_kernels(kernels, feats))

    def fusion_logits(self, g_s: torch.Tensor, g_a: torch.Tensor) -> torch.Tensor:
        return self.fusion.logits(g_s, g_a)

    def gaze_cells(self, G: torch.Tensor) -> torch.Tensor:
        return extract_gaze_points(G, self.grid)

    def pooled_gaze(self, G: torch.Tensor) -> torch.Tensor:
        return pool_gaze_map(G, self.grid)

    def variant_logits(self, mode: str, feats: torch.Tensor, G: torch.Tensor | None = None) -> torch.Tensor:
        head = self.variants[mode]
        if mode == "global":
            return head.logits(feats)
        if mode == "soft_gaze":
            return head.logits(feats, pooled_gaze=self.pooled_gaze(G))
        return head.logits(feats, cells=self.gaze_cells(G))
