"""End-to-end acceptance checks.

Each criterion prints one ``criterion N: PASS|FAIL`` line (collected again in
the terminal summary). The toy-scale criteria train three seeds on the default
synthetic corpus, which takes roughly 25 minutes on one CPU core.
"""

import time

import numpy as np
import pytest
import torch

from mcnet.action_head import extract_gaze_points, pool_gaze_map, two_way_pool
from mcnet.core import GazePoint, ModelConfig
from mcnet.gaze_heads import apply_action_kernels
from mcnet.harness.checkpoint import load_checkpoint, save_checkpoint
from mcnet.harness.evaluation import prepare_clips, run_eval
from mcnet.harness.training import TrainConfig, train_staged
from mcnet.metrics import CameraModel, aae, accuracy, affinity_from_scores, affinity_matrix, auc
from mcnet.model import MCN
from mcnet.synthdata import SynthSpec, generate_dataset, load_dataset

from conftest import fd_gradient_check
from test_action_head import brute_force_pool, random_instance

SEEDS = (0, 1, 2)
BUDGET_S = 30 * 60
RESULTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- shared toy-scale run -------------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept") / "synth"
    generate_dataset(SynthSpec(), root)
    return root


@pytest.fixture(scope="module")
def toy_runs(corpus):
    train = list(load_dataset(corpus, "train"))
    test = list(load_dataset(corpus, "test"))
    model_cfg = ModelConfig.toy(n_classes=SynthSpec().n_classes)
    clips = prepare_clips(test, model_cfg)
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        model = train_staged(train, model_cfg, TrainConfig.toy(seed=seed))
        runs[seed] = {"model": model, "report": run_eval(model, clips, prepared=True)}
    elapsed = time.perf_counter() - t0
    return {"runs": runs, "elapsed": elapsed, "clips": clips}


# -- 1 --------------------------------------------------------------------------


def test_criterion_1_pooling_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        feats, cells, r = random_instance(rng)
        v_g, v_n = two_way_pool(torch.from_numpy(feats), torch.from_numpy(cells), r)
        ref_g, ref_n = brute_force_pool(feats, cells, r)
        worst = max(worst, np.abs(v_g.numpy() - ref_g).max(), np.abs(v_n.numpy() - ref_n).max())
    exact = True
    for q in rng.normal(size=50) * 10.0 ** rng.integers(-6, 7, 50):
        for x, y in ((0, 0), (3, 3), (6, 2)):
            g, n = two_way_pool(torch.full((2, 3, 7, 7), q, dtype=torch.float64), torch.tensor([[x, y]] * 3), 1)
            exact &= bool(torch.equal(g, n))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-9 and exact and dt < 10, f"max abs err {worst:.2e}, constant map exact={exact}, {dt:.2f}s")


# -- 2 --------------------------------------------------------------------------


def test_criterion_2_paper_scale_shapes():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = ModelConfig.paper_scale()
    model = MCN(cfg, with_variants=False).eval()
    got = {}
    with torch.no_grad():
        rgb = torch.rand(1, 3, 24, 224, 224)
        flow = torch.rand(1, 2, 24, 224, 224) * 255
        F = model.features(rgb, flow)
        got["F"] = tuple(F.shape[1:])
        got["F'"] = tuple(model.action.compact(F).shape[1:])
        l = torch.softmax(torch.randn(1, cfg.n_classes), -1)
        K = model.kernel_gen(l)
        got["K"] = tuple(K.shape[1:])
        Ft = apply_action_kernels(K, F)
        got["F~"] = tuple(Ft.shape[1:])
        g_s = torch.sigmoid(model.saliency_logits(F))
        g_a = torch.sigmoid(model.action_decoder.logits(Ft))
        G = torch.sigmoid(model.fusion_logits(g_s, g_a))
        got["G_s"], got["G_a"], got["G"] = (tuple(x.shape[1:]) for x in (g_s, g_a, G))
        got["G'"] = tuple(pool_gaze_map(G, model.grid).shape[1:])
        cells = extract_gaze_points(G, model.grid)
        v_g, v_n = two_way_pool(model.action.compact(F), cells, cfg.r)
        got["branches"] = (model.action.fc_g(v_g).shape[1], model.action.fc_n(v_n).shape[1])
    want = {
        "F": (1024, 6, 14, 14),
        "F'": (1024, 3, 7, 7),
        "K": (64, 1024, 3, 5, 5),
        "F~": (64, 6, 14, 14),
        "G_s": (24, 224, 224),
        "G_a": (24, 224, 224),
        "G": (24, 224, 224),
        "G'": (3, 7, 7),
        "branches": (256, 128),
    }
    dt = time.perf_counter() - t0
    bad = {k: got[k] for k in want if got[k] != want[k]}
    verdict(2, not bad and dt < 120, f"mismatches {bad or 'none'}, {dt:.1f}s")


# -- 3 --------------------------------------------------------------------------


def test_criterion_3_gradient_checks():
    torch.manual_seed(0)
    cfg = ModelConfig.toy(n_classes=6)
    model = MCN(cfg, with_variants=False).double().eval()
    g = torch.Generator().manual_seed(0)
    rgb = torch.rand(2, 3, 8, 64, 64, generator=g, dtype=torch.float64)
    flow = torch.rand(2, 2, 8, 64, 64, generator=g, dtype=torch.float64) * 255
    cells = torch.tensor([[[1, 2]], [[2, 1]]])
    labels = torch.tensor([1, 4])

    def action_loss():
        logits = model.action_logits(model.features(rgb, flow), cells)
        return torch.nn.functional.cross_entropy(logits, labels)

    params_a = list(model.encoder.parameters()) + list(model.action.parameters())
    res_a = fd_gradient_check(action_loss, params_a, 100, seed=0)

    with torch.no_grad():
        feats = model.features(rgb, flow)
    target = torch.rand(2, 8, 64, 64, generator=g, dtype=torch.float64)
    l = torch.softmax(torch.randn(2, cfg.n_classes, generator=g, dtype=torch.float64), -1).requires_grad_(True)

    def gaze_loss():
        z = model.action_gaze_logits(feats, l)
        return torch.nn.functional.binary_cross_entropy_with_logits(z, target)

    res_b = fd_gradient_check(gaze_loss, [l] + list(model.kernel_gen.parameters()), 100, seed=1)
    wa, wb = max(r[2] for r in res_a), max(r[2] for r in res_b)
    verdict(3, wa <= 1e-4 and wb <= 1e-4 and len(res_a) >= 100 and len(res_b) >= 100,
            f"(a) max rel err {wa:.2e}, (b) max rel err {wb:.2e} over 100 coordinates each")


# -- 4 --------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    cam = CameraModel(1280, 960, 60.0)
    e = aae(GazePoint(0, 640, 480), GazePoint(0, 835.5, 480), cam)
    delta = np.zeros((32, 32))
    delta[5, 9] = 1.0
    u = auc(np.full((32, 32), 0.7), GazePoint(0, 9, 5))
    d = auc(delta, GazePoint(0, 9, 5))
    inst, cls = accuracy([0, 0, 1], [0, 1, 1])
    A = affinity_from_scores(np.array([[2.0, 4.0]]))
    ok = abs(e - 10.0) <= 0.05 and u == 0.5 and d == 1.0 and inst == 2 / 3 and cls == 0.75 and A.tolist() == [[1.0, 0.0]]
    verdict(4, ok, f"AAE {e:.4f} deg, AUC uniform {u}, delta {d}, acc ({inst:.4f}, {cls}), affinity {A.tolist()}")


# -- 5 --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_alternating_inference(toy_runs):
    stats = [toy_runs["runs"][s]["report"].trace_stats for s in SEEDS]
    max_iter = max(s["max_iter"] for s in stats)
    within3 = [s["converged_within_3"] for s in stats]
    gap = max(s["max_replay_gap"] for s in stats)
    ok = max_iter <= 10 and min(within3) >= 0.8 and gap <= 1e-9
    verdict(5, ok, f"max iterations {max_iter}, converged within 3 per seed {within3}, replay gap {gap:.1e}")


# -- 6 --------------------------------------------------------------------------


def _mean(toy_runs, variant, metric):
    return float(np.mean([toy_runs["runs"][s]["report"].variants[variant][metric] for s in SEEDS]))


@pytest.mark.slow
def test_criterion_6_mutual_context_orderings(toy_runs):
    m = lambda v, k: _mean(toy_runs, v, k)  # noqa: E731
    a = m("full", "aae") < m("saliency", "aae")
    b = m("action_gt", "aae") <= m("action", "aae")
    c = m("full", "acc_inst") > m("wo_gaze", "acc_inst") and m("full", "acc_inst") > m("center_bias", "acc_inst")
    d = m("full", "acc_inst") > m("gaze_region", "acc_inst")
    budget = toy_runs["elapsed"] < BUDGET_S
    detail = (
        f"AAE full {m('full', 'aae'):.3f} vs saliency {m('saliency', 'aae'):.3f} [{'ok' if a else 'no'}]; "
        f"action_gt {m('action_gt', 'aae'):.3f} vs action {m('action', 'aae'):.3f} [{'ok' if b else 'no'}]; "
        f"acc full {m('full', 'acc_inst'):.3f} vs w/o gaze {m('wo_gaze', 'acc_inst'):.3f}, "
        f"center bias {m('center_bias', 'acc_inst'):.3f} [{'ok' if c else 'no'}]; "
        f"gaze region {m('gaze_region', 'acc_inst'):.3f} [{'ok' if d else 'no'}]; "
        f"train+eval {toy_runs['elapsed']:.0f}s for {len(SEEDS)} seeds on {torch.get_num_threads()} thread(s)"
    )
    verdict(6, a and b and c and d and budget, detail)


# -- 7 --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_affinity(toy_runs):
    model = toy_runs["runs"][0]["model"]
    clips = toy_runs["clips"]
    classes = sorted(set(c.action_id for c in clips))[:20]
    aff = affinity_matrix(model, clips, classes)
    blocks = aff.blocks()
    print("affinity blocks (A >= 0.8):", blocks)
    ok = aff.diagonal_mean < aff.off_diagonal_mean and aff.A.min() >= 0 and aff.A.max() <= 1
    verdict(7, ok, f"mean diagonal AAE {aff.diagonal_mean:.3f} vs off-diagonal {aff.off_diagonal_mean:.3f}, "
                   f"{len(blocks)} block(s) reported")


# -- 8 --------------------------------------------------------------------------


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_8_determinism(toy_runs, corpus, tmp_path):
    model = toy_runs["runs"][0]["model"]
    back = load_checkpoint(save_checkpoint(model, tmp_path / "m.npz"))
    sa, sb = model.state_dict(), back.state_dict()
    ckpt_ok = sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)

    again = generate_dataset(SynthSpec(), tmp_path / "synth")
    synth_ok = _tree(again) == _tree(corpus)

    clips = toy_runs["clips"]
    r1 = run_eval(back, clips, prepared=True).to_json()
    r2 = run_eval(back, clips, prepared=True).to_json()
    eval_ok = r1 == r2 == toy_runs["runs"][0]["report"].to_json()
    verdict(8, ckpt_ok and synth_ok and eval_ok,
            f"checkpoint bitwise={ckpt_ok}, synth byte-identical={synth_ok}, eval reports identical={eval_ok}")
