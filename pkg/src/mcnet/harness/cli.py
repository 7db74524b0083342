"""``mcnet`` command line: synth, train, eval, infer, affinity, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import torch

from ..config import read_kv
from ..core import ModelConfig
from ..errors import ConfigError, MCNError
from ..inference import InferenceConfig, infer_batch
from ..metrics import affinity_matrix
from ..synthdata import SynthSpec, dataset_fingerprint, generate_dataset, load_clip, load_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import prepare_clips, run_eval, save_overlays
from .report import format_merged, load_report, merge_reports
from .training import TrainConfig, train_staged

log = logging.getLogger("mcnet")


def _split_list(values) -> list[str]:
    out = []
    for v in values or []:
        out += [p for p in v.split(",") if p.strip()]
    return out


def cmd_synth(args) -> int:
    spec = SynthSpec.from_text(Path(args.config).read_text()) if args.config else SynthSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    t0 = time.time()
    generate_dataset(spec, args.out, args.n_clips)
    print(f"wrote {args.n_clips or spec.clips_per_class * spec.n_classes} clips to {args.out} ({time.time() - t0:.1f}s)")
    return 0


def model_config_for(data, preset: str) -> ModelConfig:
    spec = data.spec()
    first = data[0]
    n_classes = spec.n_classes if spec else max(data.labels) + 1
    n, h, w = first.rgb.shape[:3]
    if h != w:
        raise ConfigError(f"clips must be square, got {h}x{w}")
    if preset == "toy":
        return ModelConfig.toy(n_classes=n_classes, frames=n, size=w)
    if preset == "paper_scale":
        return ModelConfig.paper_scale(n_classes=n_classes)
    raise ConfigError(f"unknown preset {preset!r}; valid: toy, paper_scale")


def cmd_train(args) -> int:
    data = load_dataset(args.data, args.split)
    model_cfg = model_config_for(data, args.preset)
    base = TrainConfig.toy() if args.preset == "toy" else TrainConfig()
    tcfg = TrainConfig.from_kv(read_kv(args.config), base) if args.config else base
    if args.seed is not None:
        tcfg = TrainConfig.from_kv({"seed": str(args.seed)}, tcfg)
    stages = tuple(int(s) for s in _split_list(args.stages)) or (1, 2, 3)
    t0 = time.time()
    model = train_staged(list(data), model_cfg, tcfg, stages=stages, with_variants=not args.no_variants)
    save_checkpoint(model, args.out)
    print(f"trained stages {list(stages)} on {len(data)} clips in {time.time() - t0:.1f}s -> {args.out}")
    return 0


def _infer_cfg(args, width: int) -> InferenceConfig:
    kw = {"flip_average": args.flip_average, "fov_deg": args.fov}
    if args.threshold is not None:
        return InferenceConfig(e_threshold=args.threshold, max_iter=args.max_iter, **kw)
    return InferenceConfig.scaled(width, max_iter=args.max_iter, **kw)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, args.split)
    icfg = _infer_cfg(args, model.cfg.width)
    clips = prepare_clips(list(data), model.cfg)
    report = run_eval(
        model, clips, _split_list(args.variants), icfg, prepared=True, fingerprint=dataset_fingerprint(args.data)
    )
    out = report.write(args.out)
    if args.heatmaps:
        maps = infer_batch(model, clips[: args.heatmaps], icfg)
        for clip, res in zip(clips, maps):
            save_overlays(clip, res.G, out / "heatmaps", "full")
    print(report.table(), end="")
    print(json.dumps(report.trace_stats, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    clip = prepare_clips([load_clip(args.clip)], model.cfg)[0]
    res = infer_batch(model, [clip], _infer_cfg(args, model.cfg.width))[0]
    text = res.trace.to_text()
    if args.trace_out:
        Path(args.trace_out).write_text(text)
    if args.heatmaps_out:
        save_overlays(clip, res.G, args.heatmaps_out, "full")
    top = int(res.l.argmax())
    print(text, end="")
    print(f"predicted action {top} (p={res.l[top]:.4f}); {res.trace.n_iter} iterations, {res.trace.terminated_by}")
    return 0


def cmd_affinity(args) -> int:
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, args.split)
    counts = Counter(data.labels)
    classes = sorted(sorted(counts), key=lambda c: -counts[c])[: args.top_m]
    classes = sorted(classes)
    clips = prepare_clips(list(data), model.cfg)
    aff = affinity_matrix(model, clips, classes, fov_deg=args.fov)
    d = aff.to_dict()
    text = (
        f"classes: {classes}\n"
        f"mean diagonal AAE {aff.diagonal_mean:.4f}, mean off-diagonal AAE {aff.off_diagonal_mean:.4f}\n"
        f"blocks (A >= {args.block_threshold}): {aff.blocks(args.block_threshold)}\n"
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "affinity.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        (out / "affinity.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    merged = merge_reports([load_report(p) for p in args.reports])
    text = format_merged(merged)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "merged.json").write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
        (out / "merged.txt").write_text(text)
    print(text, end="")
    return 0


def _add_infer_opts(p):
    p.add_argument("--flip-average", action="store_true", help="average with the mirrored clip")
    p.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")
    p.add_argument("--max-iter", type=int, default=10)
    p.add_argument("--threshold", type=float, default=None,
                   help="convergence threshold in degrees (default: 0.1 scaled from 224 px)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcnet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-clips", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="staged training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--config", help="key=value training settings")
    p.add_argument("--preset", default="toy", choices=("toy", "paper_scale"))
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int)
    p.add_argument("--stages", action="append", help="comma list, default 1,2,3")
    p.add_argument("--no-variants", action="store_true", help="skip the ablation classifier heads")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate variants on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--variants", action="append", help="comma list (default: all)")
    p.add_argument("--heatmaps", type=int, default=0, help="write overlays for the first N clips")
    _add_infer_opts(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="alternating inference on one clip directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("clip")
    p.add_argument("--trace-out")
    p.add_argument("--heatmaps-out")
    _add_infer_opts(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("affinity", help="cross-class gaze affinity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--top-m", type=int, default=20)
    p.add_argument("--fov", type=float, default=60.0)
    p.add_argument("--block-threshold", type=float, default=0.8)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_affinity)

    p = sub.add_parser("report", help="merge eval reports")
    p.add_argument("reports", nargs="+", help="report.json files or eval output dirs")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except MCNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
