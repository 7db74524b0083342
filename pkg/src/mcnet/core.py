"""Data model, input preprocessing and ground-truth gaze maps."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

Triple = tuple[int, int, int]

FLOW_CLIP = 20.0
# Reference width at which the GT Gaussian std is stated.
SIGMA_REFERENCE_WIDTH = 224


@dataclass(frozen=True)
class GazePoint:
    frame_idx: int
    x: float
    y: float


@dataclass
class ClipSample:
    """One trimmed action clip.

    ``rgb`` is (N, H, W, 3) in [0, 1]; ``flow`` is (N, H, W, 2) in [0, 255]
    (already passed through :func:`preprocess_flow`); ``gaze`` holds per-frame
    (x, y) pixel coordinates and ``valid`` flags which of them are usable.
    """

    rgb: np.ndarray
    flow: np.ndarray
    gaze: np.ndarray
    valid: np.ndarray
    action_id: int
    clip_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.rgb.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]

    def validate(self, n_classes: int | None = None) -> None:
        if self.rgb.ndim != 4 or self.rgb.shape[-1] != 3:
            raise InputError(f"{self.clip_id}: rgb must be (N, H, W, 3), got {self.rgb.shape}")
        if self.flow.shape != self.rgb.shape[:3] + (2,):
            raise InputError(
                f"{self.clip_id}: flow shape {self.flow.shape} does not match rgb {self.rgb.shape}"
            )
        n, h, w = self.rgb.shape[:3]
        if self.gaze.shape != (n, 2) or self.valid.shape != (n,):
            raise InputError(f"{self.clip_id}: gaze must have one entry per frame")
        g = self.gaze[self.valid]
        if np.any(g[:, 0] < 0) or np.any(g[:, 0] >= w) or np.any(g[:, 1] < 0) or np.any(g[:, 1] >= h):
            raise InputError(f"{self.clip_id}: valid gaze entry outside the frame")
        if self.action_id < 0 or (n_classes is not None and self.action_id >= n_classes):
            raise InputError(f"{self.clip_id}: action id {self.action_id} out of range")

    def gaze_points(self) -> list[GazePoint | None]:
        return [
            GazePoint(i, float(x), float(y)) if ok else None
            for i, ((x, y), ok) in enumerate(zip(self.gaze, self.valid))
        ]


@dataclass(frozen=True)
class ModelConfig:
    """Every shape-determining constant of the network.

    Use :meth:`paper_scale` or :meth:`toy` rather than filling this in by hand.
    """

    preset: str
    n_classes: int
    frames: int
    height: int
    width: int
    enc_channels: tuple[int, ...]
    enc_kernels: tuple[Triple, ...]
    enc_strides: tuple[Triple, ...]
    compact_channels: int
    k: int
    k_t: int
    k_h: int
    k_w: int
    gen_channels: tuple[int, int]
    dec_channels: tuple[int, ...]
    dec_kernels: tuple[Triple, ...]
    dec_strides: tuple[Triple, ...]
    fusion_channels: tuple[int, ...]
    r: int = 1
    s: int = 256
    sigma: float = 18.0
    resize: int = 256
    crop: int = 224
    horizontal_fov_deg: float = 60.0

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("r must be >= 1")
        if self.s < 2 or self.s % 2:
            raise ConfigError("s must be a positive even number")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if not 0 < self.horizontal_fov_deg < 180:
            raise ConfigError("horizontal FOV must lie in (0, 180) degrees")
        if self.n_classes < 2:
            raise ConfigError("need at least two action classes")
        if any(d % 2 == 0 for d in (self.k_t, self.k_h, self.k_w)):
            raise ConfigError("action kernel dims must be odd for symmetric padding")
        if self.gen_channels[-1] != self.enc_channels[-1]:
            raise ConfigError("kernel generator must emit one slice per feature channel")
        if self.crop > self.resize:
            raise ConfigError(f"crop {self.crop} larger than resize {self.resize}")
        if (self.height, self.width) != (self.crop, self.crop):
            raise ConfigError("network input must equal the crop size")
        if self.fusion_channels[-1] != 1:
            raise ConfigError("fusion must end in a single channel")
        if len(self.dec_channels) != len(self.dec_kernels) or len(self.dec_kernels) != len(self.dec_strides):
            raise ConfigError("decoder layer spec lengths differ")
        if self.decoder_output_shape() != (self.frames, self.height, self.width):
            raise ConfigError(
                f"decoder maps {self.feature_shape[1:]} to {self.decoder_output_shape()}, "
                f"expected {(self.frames, self.height, self.width)}"
            )
        self.pool_kernel  # raises on non-divisible grids

    # -- presets -------------------------------------------------------------

    @classmethod
    def paper_scale(cls, n_classes: int = 106, **overrides) -> "ModelConfig":
        cfg = dict(
            preset="paper_scale",
            n_classes=n_classes,
            frames=24,
            height=224,
            width=224,
            enc_channels=(64, 256, 512, 1024),
            enc_kernels=((3, 3, 3),) * 4,
            enc_strides=((1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2)),
            compact_channels=1024,
            k=64,
            k_t=3,
            k_h=5,
            k_w=5,
            gen_channels=(256, 1024),
            dec_channels=(256, 128, 64, 32),
            dec_kernels=((4, 4, 4), (4, 4, 4), (3, 4, 4), (3, 4, 4)),
            dec_strides=((2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 2, 2)),
            fusion_channels=(32, 32, 8, 1),
            r=1,
            s=256,
            sigma=18.0,
            resize=256,
            crop=224,
        )
        cfg.update(overrides)
        return cls(**cfg)

    @classmethod
    def toy(cls, n_classes: int = 20, frames: int = 8, size: int = 64, **overrides) -> "ModelConfig":
        """Small CPU-trainable network: spatial stride 8, temporal stride 4."""
        cfg = dict(
            preset="toy",
            n_classes=n_classes,
            frames=frames,
            height=size,
            width=size,
            enc_channels=(16, 32, 64, 64),
            enc_kernels=((3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 1, 1)),
            enc_strides=((1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 1, 1)),
            compact_channels=64,
            k=8,
            k_t=3,
            k_h=3,
            k_w=3,
            gen_channels=(16, 64),
            dec_channels=(32, 16, 8, 4),
            dec_kernels=((4, 4, 4), (4, 4, 4), (3, 4, 4), (3, 3, 3)),
            dec_strides=((2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1)),
            fusion_channels=(8, 8, 4, 1),
            r=1,
            s=32,
            sigma=18.0 * size / SIGMA_REFERENCE_WIDTH,
            resize=int(round(size * 256 / 224)),
            crop=size,
        )
        cfg.update(overrides)
        return cls(**cfg)

    # -- derived shapes ------------------------------------------------------

    @property
    def feature_channels(self) -> int:
        return self.enc_channels[-1]

    @property
    def latent_size(self) -> int:
        return self.k * self.k_t * self.k_h * self.k_w

    @property
    def feature_shape(self) -> tuple[int, int, int, int]:
        t, h, w = self.frames, self.height, self.width
        for (kt, kh, kw), (st, sh, sw) in zip(self.enc_kernels, self.enc_strides):
            t = _conv_out(t, kt, st, kt // 2)
            h = _conv_out(h, kh, sh, kh // 2)
            w = _conv_out(w, kw, sw, kw // 2)
        return (self.feature_channels, t, h, w)

    @property
    def compact_shape(self) -> tuple[int, int, int, int]:
        _, t, h, w = self.feature_shape
        return (self.compact_channels, _conv_out(t, 3, 2, 1), _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1))

    @property
    def pool_kernel(self) -> Triple:
        _, t, h, w = self.compact_shape
        if self.frames % t or self.height % h or self.width % w:
            raise ConfigError(
                f"gaze map {(self.frames, self.height, self.width)} not divisible by grid {(t, h, w)}"
            )
        return (self.frames // t, self.height // h, self.width // w)

    def decoder_output_shape(self) -> Triple:
        _, t, h, w = self.feature_shape
        for k, s in zip(self.dec_kernels, self.dec_strides):
            t = (t - 1) * s[0] - 2 + k[0]
            h = (h - 1) * s[1] - 2 + k[1]
            w = (w - 1) * s[2] - 2 + k[2]
        return (t, h, w)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fixed = {}
        for f in dataclasses.fields(cls):
            v = d[f.name]
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            fixed[f.name] = v
        return cls(**fixed)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# -- ground truth ---------------------------------------------------------------


def make_gaussian_gt_map(point: GazePoint, height: int, width: int, sigma: float) -> np.ndarray:
    """Gaussian target map with peak value 1 at the gaze point."""
    if sigma <= 0:
        raise InputError("sigma must be positive")
    if not (0 <= point.x < width and 0 <= point.y < height):
        raise InputError(f"gaze point ({point.x}, {point.y}) outside {width}x{height}")
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    d2 = (xs - point.x) ** 2 + (ys - point.y) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def gt_maps(sample: ClipSample, sigma: float) -> np.ndarray:
    """Per-frame GT maps; invalid frames get an all-zero map (masked from the loss)."""
    n, h, w = sample.rgb.shape[:3]
    out = np.zeros((n, h, w), dtype=np.float64)
    for i, ((x, y), ok) in enumerate(zip(sample.gaze, sample.valid)):
        if ok:
            out[i] = make_gaussian_gt_map(GazePoint(i, x, y), h, w, sigma)
    return out


def sigma_for_width(width: int, sigma_at_reference: float = 18.0) -> float:
    return sigma_at_reference * width / SIGMA_REFERENCE_WIDTH


# -- flow -----------------------------------------------------------------------


def preprocess_flow(raw: np.ndarray) -> np.ndarray:
    """Clamp raw flow to [-20, 20] and map it affinely onto [0, 255]."""
    raw = np.asarray(raw)
    if np.isnan(raw).any():
        raise InputError("flow contains NaN")
    clipped = np.clip(raw, -FLOW_CLIP, FLOW_CLIP)
    return ((clipped + FLOW_CLIP) * (255.0 / (2 * FLOW_CLIP))).astype(np.float32)


# -- augmentation ---------------------------------------------------------------


def _resize_stack(x: np.ndarray, size: int) -> np.ndarray:
    # (N, H, W, C) -> (N, size, size, C), bilinear with pixel-centre alignment
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(0, 3, 1, 2)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).numpy()


@dataclass(frozen=True)
class AugmentParams:
    ox: int
    oy: int
    flip: bool


def draw_augment(rng, train: bool, resize: int, crop: int) -> AugmentParams:
    """Random crop offset and flip in training; centre crop, no flip otherwise."""
    if crop > resize:
        raise ConfigError(f"crop {crop} larger than resize {resize}")
    if not train:
        o = (resize - crop) // 2
        return AugmentParams(o, o, False)
    rng = np.random.default_rng(rng)
    oy = int(rng.integers(0, resize - crop + 1))
    ox = int(rng.integers(0, resize - crop + 1))
    return AugmentParams(ox, oy, bool(rng.random() < 0.5))


def transform_gaze(gaze: np.ndarray, size: tuple[int, int], resize: int, crop: int, p: AugmentParams) -> np.ndarray:
    """Map (x, y) pixel coordinates through resize, crop and flip."""
    h, w = size
    gaze = np.asarray(gaze, dtype=np.float64).copy()
    if (h, w) != (resize, resize):
        gaze[:, 0] = (gaze[:, 0] + 0.5) * resize / w - 0.5
        gaze[:, 1] = (gaze[:, 1] + 0.5) * resize / h - 0.5
    gaze[:, 0] -= p.ox
    gaze[:, 1] -= p.oy
    if p.flip:
        gaze[:, 0] = crop - 1 - gaze[:, 0]
    return gaze


def apply_augment(sample: ClipSample, p: AugmentParams, resize: int, crop: int) -> ClipSample:
    if crop > resize:
        raise ConfigError(f"crop {crop} larger than resize {resize}")
    n, h, w = sample.rgb.shape[:3]
    rgb, flow = sample.rgb, sample.flow
    if (h, w) != (resize, resize):
        rgb = _resize_stack(rgb, resize)
        flow = _resize_stack(flow, resize)
    rgb = rgb[:, p.oy : p.oy + crop, p.ox : p.ox + crop]
    flow = flow[:, p.oy : p.oy + crop, p.ox : p.ox + crop]
    if p.flip:
        rgb = rgb[:, :, ::-1]
        flow = flow[:, :, ::-1].copy()
        # mirrored horizontal motion: u -> -u, i.e. 255 - value in image units
        flow[..., 0] = 255.0 - flow[..., 0]
    gaze = transform_gaze(sample.gaze, (h, w), resize, crop, p)
    inside = (gaze[:, 0] >= 0) & (gaze[:, 0] < crop) & (gaze[:, 1] >= 0) & (gaze[:, 1] < crop)
    return ClipSample(
        rgb=np.ascontiguousarray(rgb, dtype=np.float32),
        flow=np.ascontiguousarray(flow, dtype=np.float32),
        gaze=gaze,
        valid=sample.valid & inside,
        action_id=sample.action_id,
        clip_id=sample.clip_id,
    )


def augment_sample(
    sample: ClipSample,
    rng: np.random.Generator | int | None,
    train: bool,
    resize: int,
    crop: int,
) -> ClipSample:
    """Resize to ``resize`` square, crop to ``crop`` and (train only) flip.

    Gaze coordinates follow the same transform; entries that leave the crop
    become invalid. Eval mode uses a centre crop and never flips.
    """
    return apply_augment(sample, draw_augment(rng, train, resize, crop), resize, crop)


def collate(samples: list[ClipSample], sigma: float | None = None) -> dict[str, torch.Tensor]:
    """Stack clips into network tensors: rgb (B,3,N,H,W), flow (B,2,N,H,W)."""
    rgb = torch.from_numpy(np.stack([s.rgb for s in samples])).permute(0, 4, 1, 2, 3).contiguous()
    flow = torch.from_numpy(np.stack([s.flow for s in samples])).permute(0, 4, 1, 2, 3).contiguous()
    batch = {
        "rgb": rgb.float(),
        "flow": flow.float(),
        "label": torch.tensor([s.action_id for s in samples], dtype=torch.long),
        "gaze": torch.from_numpy(np.stack([s.gaze for s in samples])),
        "valid": torch.from_numpy(np.stack([s.valid for s in samples])),
    }
    if sigma is not None:
        batch["gt_maps"] = torch.from_numpy(np.stack([gt_maps(s, sigma) for s in samples])).float()
    return batch
