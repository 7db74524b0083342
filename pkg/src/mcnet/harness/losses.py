from __future__ import annotations

import torch
import torch.nn.functional as F

GAZE_HEADS = ("saliency", "action_gaze", "fused")


def masked_bce(logits: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Per-pixel BCE averaged over valid frames. Returns (loss, had_valid_frames)."""
    per_frame = F.binary_cross_entropy_with_logits(logits, target, reduction="none").mean(dim=(-2, -1))
    mask = valid.to(per_frame.dtype)
    count = mask.sum()
    if count == 0:
        return per_frame.sum() * 0.0, False
    return (per_frame * mask).sum() / count, True


def compute_losses(outputs: dict, targets: dict) -> dict:
    """Action cross-entropy and gaze BCE for every head present in ``outputs``.

    Map outputs are logits of shape (B, N, H, W). ``targets`` holds ``label``,
    ``gt_maps`` and the per-frame ``valid`` mask. The returned dict has
    ``action`` (or None), ``gaze`` (head -> loss) and ``no_valid_gaze`` (set when
    every frame was invalid and the gaze terms were zeroed).
    """
    out = {"action": None, "gaze": {}, "no_valid_gaze": False}
    if "action_logits" in outputs:
        out["action"] = F.cross_entropy(outputs["action_logits"], targets["label"])
    for head in GAZE_HEADS:
        if head in outputs:
            loss, ok = masked_bce(outputs[head], targets["gt_maps"].to(outputs[head].dtype), targets["valid"])
            out["gaze"][head] = loss
            out["no_valid_gaze"] |= not ok
    return out
