"""Gaze-producing paths: saliency decoder, action-conditioned kernels, late fusion."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .core import ModelConfig
from .encoder import init_conv
from .errors import ConfigError, InputError

# initial map logit: gaze maps are mostly background, so start near the
# background rate instead of 0.5 everywhere
PRIOR_LOGIT = -3.0


class GazeDecoder(nn.Module):
    """Transposed-conv 3D decoder from a feature volume to per-frame maps in [0, 1].

    Used twice: on ``F`` for the saliency map and on the action-filtered
    features for the action-based map (separate weights).
    """

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.in_channels = in_channels
        self.cfg = cfg
        layers = []
        cin = in_channels
        for cout, k, s in zip(cfg.dec_channels, cfg.dec_kernels, cfg.dec_strides):
            layers += [
                nn.ConvTranspose3d(cin, cout, k, stride=s, padding=1, bias=False),
                nn.BatchNorm3d(cout),
                nn.ReLU(inplace=True),
            ]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv3d(cin, 1, 1)
        init_conv(self)
        nn.init.constant_(self.head.bias, PRIOR_LOGIT)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        _, t, h, w = self.cfg.feature_shape
        if x.dim() != 5 or tuple(x.shape[1:]) != (self.in_channels, t, h, w):
            raise ConfigError(
                f"decoder expects (B, {self.in_channels}, {t}, {h}, {w}), got {tuple(x.shape)}"
            )
        return self.head(self.body(x)).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class KernelGenerator(nn.Module):
    """Maps an action likelihood ``l`` (B, n) to kernels (B, k, c, k_t, k_h, k_w).

    One fully connected layer produces a latent of size k*k_t*k_h*k_w, which is
    viewed as k single-channel volumes and lifted to c channels by two 3D
    convolutions (kernel 3, stride 1, padding 1).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fc = nn.Linear(cfg.n_classes, cfg.latent_size)
        g0, g1 = cfg.gen_channels
        self.conv1 = nn.Conv3d(1, g0, 3, padding=1)
        self.conv2 = nn.Conv3d(g0, g1, 3, padding=1)
        init_conv(self)
        # fc bias is the only input-independent path; keep it small but nonzero
        nn.init.normal_(self.fc.bias, std=0.01)

    def forward(self, l: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if l.dim() == 1:
            l = l.unsqueeze(0)
        if l.shape[-1] != cfg.n_classes:
            raise InputError(f"likelihood has length {l.shape[-1]}, expected {cfg.n_classes}")
        b = l.shape[0]
        z = self.fc(l).view(b * cfg.k, 1, cfg.k_t, cfg.k_h, cfg.k_w)
        z = self.conv2(F.relu(self.conv1(z)))
        return z.view(b, cfg.k, cfg.feature_channels, cfg.k_t, cfg.k_h, cfg.k_w)


def generate_action_kernels(l: torch.Tensor, generator: KernelGenerator) -> torch.Tensor:
    return generator(l)


def apply_action_kernels(kernels: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """Convolve each sample's features with its own kernel bank.

    ``kernels`` is (k, c, kt, kh, kw) shared by the batch or (B, k, c, kt, kh, kw);
    ``feats`` is (B, c, t, h, w) or a single (c, t, h, w) volume. Stride 1,
    shape-preserving zero padding, no bias.
    """
    single = feats.dim() == 4
    if single:
        feats = feats.unsqueeze(0)
    b, c, t, h, w = feats.shape
    if kernels.dim() == 5:
        kernels = kernels.unsqueeze(0).expand(b, *kernels.shape)
    if kernels.shape[0] != b:
        raise InputError(f"{kernels.shape[0]} kernel banks for a batch of {b}")
    _, k, kc, kt, kh, kw = kernels.shape
    if kc != c:
        raise InputError(f"kernel channel dim {kc} != feature channels {c}")
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"even kernel dims {(kt, kh, kw)} leave padding undefined")
    out = F.conv3d(
        feats.reshape(1, b * c, t, h, w),
        kernels.reshape(b * k, c, kt, kh, kw),
        padding=(kt // 2, kh // 2, kw // 2),
        groups=b,
    ).view(b, k, t, h, w)
    return out[0] if single else out


class FusionHead(nn.Module):
    """Per-frame 2D convolutions over the stacked (G_s, G_a) pair."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.fusion_channels
        layers = []
        cin = 2
        for i, cout in enumerate(widths):
            last = i == len(widths) - 1
            layers.append(nn.Conv2d(cin, cout, 1 if last else 3, padding=0 if last else 1))
            if not last:
                layers.append(nn.ReLU(inplace=True))
            cin = cout
        self.body = nn.Sequential(*layers)
        init_conv(self)
        nn.init.constant_(self.body[-1].bias, PRIOR_LOGIT)

    def logits(self, g_s: torch.Tensor, g_a: torch.Tensor) -> torch.Tensor:
        if g_s.shape != g_a.shape:
            raise InputError(f"cannot fuse maps of shapes {tuple(g_s.shape)} and {tuple(g_a.shape)}")
        single = g_s.dim() == 3
        if single:
            g_s, g_a = g_s.unsqueeze(0), g_a.unsqueeze(0)
        b, n, h, w = g_s.shape
        x = torch.stack([g_s, g_a], dim=2).reshape(b * n, 2, h, w)
        out = self.body(x).view(b, n, h, w)
        return out[0] if single else out

    def forward(self, g_s: torch.Tensor, g_a: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(g_s, g_a))


def predict_saliency(feats: torch.Tensor, decoder: GazeDecoder) -> torch.Tensor:
    return decoder(feats)


def decode_action_gaze(filtered: torch.Tensor, decoder: GazeDecoder) -> torch.Tensor:
    return decoder(filtered)


def fuse(g_s: torch.Tensor, g_a: torch.Tensor, fusion: FusionHead) -> torch.Tensor:
    return fusion(g_s, g_a)
