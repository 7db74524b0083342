import hashlib
import json
import math

import numpy as np
import pytest
import torch

from mcnet.core import ModelConfig
from mcnet.errors import ConfigError, DivergenceError, IntegrityError, NotFoundError, StateError
from mcnet.harness import cli
from mcnet.harness.checkpoint import load_checkpoint, save_checkpoint
from mcnet.harness.evaluation import (
    EvalReport,
    heatmap_overlay,
    load_dump,
    resolve_variant,
    run_eval,
    summarize,
)
from mcnet.harness.losses import compute_losses
from mcnet.harness.report import format_merged, load_report, merge_reports
from mcnet.harness.training import TrainConfig, run_stage, train_staged
from mcnet.model import MCN
from mcnet.synthdata import load_dataset

TINY = dict(epochs_stage1=2, epochs_stage2=1, epochs_stage3=1, batch_size=6)


def _hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


def _cfg(small_spec):
    return ModelConfig.toy(n_classes=small_spec.n_classes)


@pytest.fixture(scope="module")
def tiny_model(small_samples, small_spec):
    return train_staged(small_samples, _cfg(small_spec), TrainConfig.toy(**TINY))


@pytest.fixture(scope="module")
def test_samples(small_dataset):
    return list(load_dataset(small_dataset, "test"))


# -- losses ---------------------------------------------------------------------


def _targets(b=2, n=3, h=4, w=4, valid=True):
    return {
        "label": torch.zeros(b, dtype=torch.long),
        "gt_maps": torch.full((b, n, h, w), 0.3, dtype=torch.float64),
        "valid": torch.full((b, n), valid),
    }


def test_cross_entropy_examples():
    k = 7
    uniform = compute_losses({"action_logits": torch.zeros(2, k)}, _targets())
    assert uniform["action"].item() == pytest.approx(math.log(k), abs=1e-6)
    sharp = torch.full((2, k), -50.0)
    sharp[:, 0] = 50.0
    assert compute_losses({"action_logits": sharp}, _targets())["action"].item() == pytest.approx(0.0, abs=1e-12)


def test_bce_minimum_is_target_entropy():
    p = 0.3
    entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))

    def loss(z):
        out = compute_losses({"saliency": torch.full((2, 3, 4, 4), z, dtype=torch.float64)}, _targets())
        return out["gaze"]["saliency"].item()

    z0 = math.log(p / (1 - p))
    assert loss(z0) == pytest.approx(entropy, abs=1e-12)
    assert loss(z0 - 0.1) > loss(z0) and loss(z0 + 0.1) > loss(z0)


def test_invalid_frames_contribute_zero():
    tg = _targets(valid=False)
    out = compute_losses({"saliency": torch.randn(2, 3, 4, 4, dtype=torch.float64)}, tg)
    assert out["gaze"]["saliency"].item() == 0.0 and out["no_valid_gaze"]
    # masking one frame equals dropping it
    tg = _targets()
    tg["valid"][:, 1] = False
    logits = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    masked = compute_losses({"fused": logits}, tg)["gaze"]["fused"]
    keep = {k: v[:, [0, 2]] for k, v in _targets().items() if k != "label"}
    keep["label"] = tg["label"]
    dropped = compute_losses({"fused": logits[:, [0, 2]]}, keep)["gaze"]["fused"]
    assert masked.item() == pytest.approx(dropped.item(), abs=1e-12)


# -- training -------------------------------------------------------------------


def test_train_config_validation_and_text():
    with pytest.raises(ConfigError):
        TrainConfig(lr_action=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs_stage2=0)
    cfg = TrainConfig.toy(seed=4)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    assert TrainConfig.from_kv({"batch_size": "3"}, cfg).batch_size == 3
    with pytest.raises(ConfigError):
        TrainConfig.from_kv({"momentum": "0.9"})
    default = TrainConfig()
    assert (default.lr_action, default.lr_gaze) == (1e-4, 1e-7)
    assert default.estimated_gaze == 0.0
    with pytest.raises(ConfigError):
        TrainConfig(estimated_gaze=1.5)


def test_provenance_and_readiness(tiny_model):
    assert tiny_model.ready
    assert [r["stage"] for r in tiny_model.provenance] == [1, 2, 3]
    assert all(r["seed"] == 0 for r in tiny_model.provenance)
    assert [r["epochs"] for r in tiny_model.provenance] == [2, 1, 1]


def test_stage1_loss_decreases(small_samples, small_spec):
    torch.manual_seed(0)
    model = MCN(_cfg(small_spec))
    rec = run_stage(model, 1, small_samples, TrainConfig.toy(epochs_stage1=3, batch_size=6), np.random.default_rng(0))
    assert rec["loss_history"][-1] < rec["loss_history"][0]


def test_estimated_gaze_changes_stage1(small_samples, small_spec):
    out = {}
    for p in (0.0, 1.0):
        torch.manual_seed(0)
        model = MCN(_cfg(small_spec))
        run_stage(model, 1, small_samples, TrainConfig.toy(**TINY, estimated_gaze=p), np.random.default_rng(0))
        out[p] = _hash(model.action)
    assert out[0.0] != out[1.0]


def test_later_stages_freeze_earlier_modules(small_samples, small_spec):
    torch.manual_seed(0)
    model = MCN(_cfg(small_spec))
    tcfg = TrainConfig.toy(**TINY)
    rng = np.random.default_rng(0)
    run_stage(model, 1, small_samples, tcfg, rng)
    names = ("encoder", "action", "saliency_decoder", "kernel_gen", "action_decoder", "fusion", "variants")
    before = {n: _hash(getattr(model, n)) for n in names}
    run_stage(model, 2, small_samples, tcfg, rng)
    after2 = {n: _hash(getattr(model, n)) for n in names}
    changed = {n for n in names if before[n] != after2[n]}
    assert changed == {"kernel_gen", "action_decoder"}
    run_stage(model, 3, small_samples, tcfg, rng)
    after3 = {n: _hash(getattr(model, n)) for n in names}
    assert {n for n in names if after2[n] != after3[n]} == {"fusion"}


def test_non_finite_loss_is_divergence(small_samples, small_spec):
    bad = [s for s in small_samples[:6]]
    bad[0] = type(bad[0])(**{**bad[0].__dict__, "rgb": np.full_like(bad[0].rgb, np.nan)})
    with pytest.raises(DivergenceError):
        train_staged(bad, _cfg(small_spec), TrainConfig.toy(**TINY, augment=False), stages=(1,))
    assert DivergenceError("x").exit_code == 3


def test_training_is_seeded(small_samples, small_spec, tiny_model):
    again = train_staged(small_samples, _cfg(small_spec), TrainConfig.toy(**TINY))
    assert _hash(again) == _hash(tiny_model)


# -- checkpoint -----------------------------------------------------------------


def test_checkpoint_round_trip_is_bitwise(tmp_path, tiny_model):
    path = save_checkpoint(tiny_model, tmp_path / "m.npz")
    back = load_checkpoint(path)
    a, b = tiny_model.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and torch.equal(a[k], b[k]), k
    assert back.provenance == json.loads(json.dumps(tiny_model.provenance))
    assert back.cfg == tiny_model.cfg and back.ready


def test_checkpoint_errors(tmp_path):
    with pytest.raises(NotFoundError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "junk.npz")


# -- evaluation -----------------------------------------------------------------


def test_eval_is_reproducible_after_reload(tmp_path, tiny_model, test_samples):
    r1 = run_eval(tiny_model, test_samples)
    r2 = run_eval(load_checkpoint(save_checkpoint(tiny_model, tmp_path / "m.npz")), test_samples)
    assert r1.to_json() == r2.to_json()
    assert set(r1.variants) == {"saliency", "action", "action_gt", "full", "wo_gaze", "center_bias",
                                "gaze_region", "soft_gaze"}
    assert r1.trace_stats["max_iter"] <= 10
    assert r1.trace_stats["max_replay_gap"] <= 1e-9


def test_report_recomputes_from_dump(tmp_path, tiny_model, test_samples):
    report = run_eval(tiny_model, test_samples)
    out = report.write(tmp_path / "eval")
    clips = load_dump(out / "clips.jsonl")
    again = summarize(clips, list(report.variants), tiny_model.cfg.n_classes)
    for v, row in report.variants.items():
        for m, val in row.items():
            assert again[v][m] == pytest.approx(val, abs=1e-9), (v, m)
    assert EvalReport.from_json((out / "report.json").read_text()).variants == report.variants
    assert len(list((out / "traces").glob("*.txt"))) == len(test_samples)


def test_variant_names():
    assert resolve_variant("w/o gaze") == "wo_gaze"
    assert resolve_variant("Action-based*") == "action_gt"
    with pytest.raises(ConfigError, match="valid"):
        resolve_variant("attention")


def test_eval_needs_ready_model_and_variant_heads(small_spec, test_samples):
    model = MCN(_cfg(small_spec), with_variants=False)
    with pytest.raises(StateError):
        run_eval(model, test_samples)
    model.ready = True
    with pytest.raises(ConfigError):
        run_eval(model, test_samples, ["gaze_region"])


def test_merge_reports(tmp_path, tiny_model, test_samples):
    out = run_eval(tiny_model, test_samples, ["saliency", "full"]).write(tmp_path / "e")
    rep = load_report(out)
    merged = merge_reports([rep, rep])
    assert merged["variants"]["full"]["aae"]["std"] == 0.0
    assert merged["variants"]["full"]["aae"]["mean"] == rep["variants"]["full"]["aae"]
    assert "gaze prediction" in format_merged(merged)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(IntegrityError):
        load_report(tmp_path / "bad.json")


def test_heatmap_overlay_shape():
    img = heatmap_overlay(np.zeros((16, 16, 3), np.float32), np.random.default_rng(0).random((16, 16)))
    assert img.shape == (16, 16, 3)


# -- command line ---------------------------------------------------------------


def test_cli_end_to_end(tmp_path, small_dataset, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs_stage1=1\nepochs_stage2=1\nepochs_stage3=1\nbatch_size=6\n")
    ckpt = tmp_path / "m.npz"
    assert cli.main(["train", "--data", str(small_dataset), "--out", str(ckpt), "--config", str(cfg)]) == 0
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(small_dataset), "--out", str(tmp_path / "ev"),
                     "--variants", "saliency,full", "--heatmaps", "1"]) == 0
    assert (tmp_path / "ev" / "report.json").exists()
    assert any((tmp_path / "ev" / "heatmaps").iterdir())
    trace = tmp_path / "t.txt"
    assert cli.main(["infer", "--ckpt", str(ckpt), str(small_dataset / "clip00000"), "--trace-out", str(trace)]) == 0
    assert trace.read_text().startswith("init")
    assert cli.main(["affinity", "--ckpt", str(ckpt), "--data", str(small_dataset), "--top-m", "3",
                     "--out", str(tmp_path / "aff")]) == 0
    assert len(json.loads((tmp_path / "aff" / "affinity.json").read_text())["classes"]) == 3
    assert cli.main(["report", str(tmp_path / "ev"), str(tmp_path / "ev")]) == 0
    assert "full" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, small_dataset, monkeypatch):
    assert cli.main(["synth", "--out", str(tmp_path / "s"), "--n-clips", "3"]) == 0
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.npz"), "--data", str(small_dataset),
                     "--out", str(tmp_path / "x")]) == 1
    (tmp_path / "bad.npz").write_bytes(b"garbage")
    assert cli.main(["eval", "--ckpt", str(tmp_path / "bad.npz"), "--data", str(small_dataset),
                     "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m.npz")]) == 1

    def diverge(*a, **k):
        raise DivergenceError("boom")

    monkeypatch.setattr(cli, "train_staged", diverge)
    assert cli.main(["train", "--data", str(small_dataset), "--out", str(tmp_path / "m.npz")]) == 3
