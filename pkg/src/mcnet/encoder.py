"""Two-stream 3D convolutional feature encoder.

RGB and flow are encoded by structurally identical but independent stacks
(separate normalisation statistics per stream) and fused by element-wise
summation. :class:`CompactBlock` is the deeper, stride-2 block that turns the
fused features into the compact volume used by the action head.
"""

from __future__ import annotations

import torch
from torch import nn

from .core import ModelConfig
from .errors import ConfigError


def init_conv(module: nn.Module) -> None:
    """Fan-in scaled zero-mean weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvBNReLU3d(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride):
        pad = tuple(k // 2 for k in kernel)
        super().__init__(
            nn.Conv3d(cin, cout, kernel, stride=stride, padding=pad, bias=False),
            nn.BatchNorm3d(cout),
            nn.ReLU(inplace=True),
        )


class Stream(nn.Sequential):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        layers = []
        cin = in_channels
        for cout, k, s in zip(cfg.enc_channels, cfg.enc_kernels, cfg.enc_strides):
            layers.append(ConvBNReLU3d(cin, cout, k, s))
            cin = cout
        super().__init__(*layers)


class Encoder(nn.Module):
    """``F = Enc_rgb(rgb) + Enc_flow(flow)``.

    Inputs are batched ``(B, 3, N, H, W)`` rgb in [0, 1] and ``(B, 2, N, H, W)``
    flow images in [0, 255].
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.rgb = Stream(3, cfg)
        self.flow = Stream(2, cfg)
        init_conv(self)

    def _check(self, x: torch.Tensor, channels: int, name: str) -> None:
        expected = (channels, self.cfg.frames, self.cfg.height, self.cfg.width)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ConfigError(f"{name} input {tuple(x.shape)} does not match config {expected}")

    def encode_rgb_only(self, rgb: torch.Tensor) -> torch.Tensor:
        self._check(rgb, 3, "rgb")
        return self.rgb(rgb * 2.0 - 1.0)

    def encode_flow_only(self, flow: torch.Tensor) -> torch.Tensor:
        self._check(flow, 2, "flow")
        return self.flow(flow / 127.5 - 1.0)

    def forward(self, rgb: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
        return self.encode_rgb_only(rgb) + self.encode_flow_only(flow)


class CompactBlock(nn.Module):
    """Halves time and space: ``(c, t, h, w) -> (c', t/2, h/2, w/2)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.block = ConvBNReLU3d(cfg.feature_channels, cfg.compact_channels, (3, 3, 3), (2, 2, 2))
        init_conv(self)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if tuple(feats.shape[1:]) != self.cfg.feature_shape:
            raise ConfigError(f"feature map {tuple(feats.shape[1:])} != {self.cfg.feature_shape}")
        return self.block(feats)


def encode(rgb: torch.Tensor, flow: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(rgb, flow)


def encode_compact(feats: torch.Tensor, block: CompactBlock) -> torch.Tensor:
    return block(feats)
