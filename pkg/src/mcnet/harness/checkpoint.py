"""Checkpoint container: one ``.npz`` holding every tensor plus a JSON header."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..core import ModelConfig
from ..errors import IntegrityError, NotFoundError
from ..model import MCN

FORMAT_VERSION = 1
META_KEY = "__meta__"


def save_checkpoint(model: MCN, path, provenance: list | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = {
        "version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "with_variants": len(model.variants) > 0,
        "provenance": provenance if provenance is not None else getattr(model, "provenance", []),
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> MCN:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data[META_KEY]).decode())
            arrays = {k: data[k] for k in data.files if k != META_KEY}
    except (KeyError, ValueError, OSError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    model = MCN(ModelConfig.from_dict(meta["config"]), with_variants=meta["with_variants"])
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise IntegrityError(f"{path}: parameter mismatch (missing={missing}, unexpected={unexpected})")
    model.provenance = meta["provenance"]
    model.ready = True
    model.eval()
    return model
