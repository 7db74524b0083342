from __future__ import annotations

import numpy as np
import pytest
import torch

from mcnet.core import ClipSample, ModelConfig
from mcnet.synthdata import SynthSpec, generate_dataset, load_dataset

torch.set_num_threads(1)


def random_clip(cfg: ModelConfig, rng: np.random.Generator, action_id: int = 0, clip_id: str = "c") -> ClipSample:
    n, h, w = cfg.frames, cfg.height, cfg.width
    return ClipSample(
        rgb=rng.random((n, h, w, 3)).astype(np.float32),
        flow=(rng.random((n, h, w, 2)) * 255).astype(np.float32),
        gaze=np.stack([rng.uniform(0, w - 1, n), rng.uniform(0, h - 1, n)], axis=1),
        valid=np.ones(n, bool),
        action_id=action_id,
        clip_id=clip_id,
    )


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return ModelConfig.toy(n_classes=6)


@pytest.fixture(scope="session")
def small_spec() -> SynthSpec:
    return SynthSpec(n_verbs=2, n_nouns=3, clips_per_class=4, seed=5)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("small_synth")
    generate_dataset(small_spec, root)
    return root


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return list(load_dataset(small_dataset, "train"))


def fd_gradient_check(loss_fn, tensors, n_coords: int, seed: int = 0, eps: float = 1e-6):
    """Central differences against autograd at ``n_coords`` random coordinates.

    ``tensors`` are float64 leaves with requires_grad. Returns a list of
    (analytic, numeric, relative_error) with denominator max(|a|, |n|, 1e-7).
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    sizes = np.array([t.numel() for t in tensors])
    rng = np.random.default_rng(seed)
    which = rng.choice(len(tensors), size=n_coords, p=sizes / sizes.sum())
    out = []
    with torch.no_grad():
        for ti in which:
            t = tensors[ti]
            flat = t.view(-1)
            j = int(rng.integers(t.numel()))
            old = flat[j].item()
            flat[j] = old + eps
            up = loss_fn().item()
            flat[j] = old - eps
            down = loss_fn().item()
            flat[j] = old
            num = (up - down) / (2 * eps)
            ana = grads[ti].view(-1)[j].item()
            out.append((ana, num, abs(ana - num) / max(abs(ana), abs(num), 1e-7)))
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
