"""Staged training schedule.

Stage 1 trains the encoder, the gaze-guided action head and the saliency
decoder together, pooling around ground-truth gaze (optionally, for a share
of clips, around the saliency head's own estimate). Stage 2 trains the kernel
generator and the action-gaze decoder on the frozen stage-1 model's predicted
likelihoods. Stage 3 trains the late fusion alone.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..action_head import extract_gaze_points, pool_gaze_map
from ..config import format_kv, parse_kv
from ..core import ClipSample, ModelConfig, augment_sample, collate
from ..errors import ConfigError, DivergenceError
from ..model import MCN, VARIANT_MODES
from .losses import compute_losses

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_action: float = 1e-4
    lr_gaze: float = 1e-7
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    epochs_stage3: int = 5
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    augment: bool = True
    # chance per clip that stage 1 pools at the saliency head's own gaze
    # estimate instead of the ground truth
    estimated_gaze: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_action <= 0 or self.lr_gaze <= 0:
            raise ConfigError("learning rates must be positive")
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_stage3) < 1:
            raise ConfigError("every stage needs at least one epoch")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if not 0.0 <= self.estimated_gaze <= 1.0:
            raise ConfigError("estimated_gaze must lie in [0, 1]")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Settings for randomly initialised toy networks.

        The default gaze rate of 1e-7 suits a pretrained backbone; from
        scratch the gaze heads need a rate comparable to the action head.
        Half the clips pool at the estimated gaze so the classifier also
        learns to use the non-gaze context when the estimate is off.
        """
        cfg = dict(
            lr_action=2e-3, lr_gaze=2e-3, epochs_stage1=8, epochs_stage2=5, epochs_stage3=3, batch_size=16,
            estimated_gaze=0.5,
        )
        cfg.update(overrides)
        return cls(**cfg)

    def to_text(self) -> str:
        return format_kv(dataclasses.asdict(self))

    @classmethod
    def from_kv(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        kw = dataclasses.asdict(base)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown training setting {key!r}")
            t = types[key]
            if t == "bool":
                kw[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                kw[key] = (float if t == "float" else int)(raw)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_kv(parse_kv(text), base)


def _batches(samples, batch_size, rng, train_cfg, model_cfg, train: bool):
    order = rng.permutation(len(samples)) if train else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = []
        for i in order[start : start + batch_size]:
            s = samples[int(i)]
            if train_cfg.augment:
                seed = int(rng.integers(2**32)) if train else None
                s = augment_sample(s, seed, train, model_cfg.resize, model_cfg.crop)
            chunk.append(s)
        yield collate(chunk, sigma=model_cfg.sigma)


def _set_trainable(model: MCN, groups: tuple[str, ...]) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    for g in groups:
        for p in model.group_parameters(g):
            p.requires_grad_(True)
    # frozen modules keep their normalisation statistics
    model.eval()
    for name in ("encoder", "action", "saliency_decoder", "kernel_gen", "action_decoder", "fusion", "variants"):
        module = getattr(model, name)
        if any(p.requires_grad for p in module.parameters()):
            module.train()


def _check_finite(loss: torch.Tensor, stage: int, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at stage {stage}, epoch {epoch}, step {step}")


def _stage1_loss(model: MCN, batch: dict, train_cfg: TrainConfig) -> torch.Tensor:
    feats = model.features(batch["rgb"], batch["flow"])
    sal = model.saliency_logits(feats)
    gaze = batch["gt_maps"]
    if train_cfg.estimated_gaze > 0:
        swap = torch.rand(gaze.shape[0]) < train_cfg.estimated_gaze
        gaze = torch.where(swap.view(-1, 1, 1, 1), torch.sigmoid(sal.detach()), gaze)
    cells = extract_gaze_points(gaze, model.grid)
    outputs = {"action_logits": model.action_logits(feats, cells), "saliency": sal}
    losses = compute_losses(outputs, batch)
    total = losses["action"] + losses["gaze"]["saliency"]
    if len(model.variants):
        detached = feats.detach()
        pooled = pool_gaze_map(gaze, model.grid)
        for mode in VARIANT_MODES:
            head = model.variants[mode]
            if mode == "global":
                logits = head.logits(detached)
            elif mode == "soft_gaze":
                logits = head.logits(detached, pooled_gaze=pooled)
            else:
                logits = head.logits(detached, cells=cells)
            total = total + compute_losses({"action_logits": logits}, batch)["action"]
    return total


def _stage2_loss(model: MCN, batch: dict, train_cfg: TrainConfig) -> torch.Tensor:
    with torch.no_grad():
        feats = model.features(batch["rgb"], batch["flow"])
        cells = extract_gaze_points(batch["gt_maps"], model.grid)
        l = torch.softmax(model.action_logits(feats, cells), dim=-1)
    out = {"action_gaze": model.action_gaze_logits(feats, l)}
    return compute_losses(out, batch)["gaze"]["action_gaze"]


def _fusion_inputs(model: MCN, batch: dict) -> dict:
    with torch.no_grad():
        feats = model.features(batch["rgb"], batch["flow"])
        cells = extract_gaze_points(batch["gt_maps"], model.grid)
        l = torch.softmax(model.action_logits(feats, cells), dim=-1)
        g_s = torch.sigmoid(model.saliency_logits(feats))
        g_a = torch.sigmoid(model.action_gaze_logits(feats, l))
    return {"g_s": g_s, "g_a": g_a, "gt_maps": batch["gt_maps"], "valid": batch["valid"], "label": batch["label"]}


def _stage3_loss(model: MCN, batch: dict, train_cfg: TrainConfig) -> torch.Tensor:
    if "g_s" not in batch:
        batch = _fusion_inputs(model, batch)
    out = {"fused": model.fusion_logits(batch["g_s"], batch["g_a"])}
    return compute_losses(out, batch)["gaze"]["fused"]


def _fusion_cache(model: MCN, samples, train_cfg: TrainConfig) -> dict:
    """Both gaze maps for every clip under the test-time transform.

    Everything upstream of the fusion is frozen in stage 3, so the inputs are
    computed once instead of re-decoding every epoch.
    """
    parts = [
        _fusion_inputs(model, batch)
        for batch in _batches(samples, train_cfg.batch_size, None, train_cfg, model.cfg, False)
    ]
    return {k: torch.cat([p[k] for p in parts]) for k in parts[0]}


def _cached_batches(cache: dict, batch_size: int, rng: np.random.Generator):
    order = torch.from_numpy(rng.permutation(len(cache["label"])))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield {k: v[idx] for k, v in cache.items()}


STAGES = {
    1: (("encoder", "action", "saliency", "variants"), _stage1_loss),
    2: (("action_gaze",), _stage2_loss),
    3: (("fusion",), _stage3_loss),
}

GAZE_GROUPS = {"saliency", "action_gaze", "fusion"}


def run_stage(model: MCN, stage: int, samples, train_cfg: TrainConfig, rng: np.random.Generator) -> dict:
    groups, loss_fn = STAGES[stage]
    groups = tuple(g for g in groups if g != "variants" or len(model.variants))
    _set_trainable(model, groups)
    param_groups = [
        {"params": list(model.group_parameters(g)), "lr": train_cfg.lr_gaze if g in GAZE_GROUPS else train_cfg.lr_action}
        for g in groups
    ]
    opt = torch.optim.Adam(
        param_groups, betas=(train_cfg.beta1, train_cfg.beta2), weight_decay=train_cfg.weight_decay
    )
    epochs = getattr(train_cfg, f"epochs_stage{stage}")
    cache = _fusion_cache(model, samples, train_cfg) if stage == 3 else None
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        if cache is not None:
            batches = _cached_batches(cache, train_cfg.batch_size, rng)
        else:
            batches = _batches(samples, train_cfg.batch_size, rng, train_cfg, model.cfg, True)
        for step, batch in enumerate(batches):
            loss = loss_fn(model, batch, train_cfg)
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            n = batch["label"].shape[0]
            total += loss.item() * n
            count += n
        history.append(total / count)
        log.info("stage %d epoch %d loss %.5f", stage, epoch + 1, history[-1])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return {"stage": stage, "epochs": epochs, "loss_history": history}


def train_staged(
    samples: list[ClipSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    stages: tuple[int, ...] = (1, 2, 3),
    with_variants: bool = True,
) -> MCN:
    """Train a fresh model through the given stages; provenance lands on ``model.provenance``."""
    torch.manual_seed(train_cfg.seed)
    model = MCN(model_cfg, with_variants=with_variants)
    rng = np.random.default_rng(train_cfg.seed)
    model.provenance = []
    for stage in stages:
        record = run_stage(model, stage, samples, train_cfg, rng)
        record["seed"] = train_cfg.seed
        model.provenance.append(record)
        if not all(math.isfinite(v) for v in record["loss_history"]):
            raise DivergenceError(f"stage {stage} produced a non-finite epoch loss")
    model.ready = True
    return model
