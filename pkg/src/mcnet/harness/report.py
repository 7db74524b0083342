"""Merge several eval reports (e.g. one per seed) into comparison tables."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import IntegrityError, NotFoundError
from .evaluation import VARIANTS

METRICS = ("aae", "auc", "acc_inst", "acc_cls")


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise NotFoundError(f"report {path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: malformed report ({exc})") from exc


def merge_reports(reports: list[dict]) -> dict:
    """Mean and standard deviation of every metric over the given reports."""
    merged: dict[str, dict[str, dict[str, float]]] = {}
    for v in VARIANTS:
        rows = [r["variants"][v] for r in reports if v in r["variants"]]
        if not rows:
            continue
        merged[v] = {}
        for m in METRICS:
            vals = [row[m] for row in rows if m in row]
            if vals:
                merged[v][m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    conv = [r["trace_stats"]["converged_within_3"] for r in reports if "trace_stats" in r]
    return {"variants": merged, "n_reports": len(reports), "converged_within_3": conv}


def format_merged(merged: dict) -> str:
    """Two tables: gaze variants (AAE, AUC) and action variants (accuracy)."""
    gaze_rows = [v for v in ("saliency", "action", "action_gt", "full") if "aae" in merged["variants"].get(v, {})]
    act_rows = [
        v
        for v in ("wo_gaze", "center_bias", "gaze_region", "soft_gaze", "full")
        if "acc_inst" in merged["variants"].get(v, {})
    ]

    def cell(v, m):
        d = merged["variants"][v][m]
        return f"{d['mean']:.4f}±{d['std']:.4f}"

    lines = [f"gaze prediction (mean±std over {merged['n_reports']} runs)"]
    lines.append(f"{'variant':<12} {'AAE (deg)':>17} {'AUC':>17}")
    for v in gaze_rows:
        lines.append(f"{v:<12} {cell(v, 'aae'):>17} {cell(v, 'auc'):>17}")
    lines.append("")
    lines.append("action recognition")
    lines.append(f"{'variant':<12} {'inst acc':>17} {'cls acc':>17}")
    for v in act_rows:
        lines.append(f"{v:<12} {cell(v, 'acc_inst'):>17} {cell(v, 'acc_cls'):>17}")
    return "\n".join(lines) + "\n"
