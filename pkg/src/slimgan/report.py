"""Figure and table emission for training logs and ablation sweeps.

All figures render through the Agg backend straight to files; identical
inputs produce byte-identical images.
"""

from __future__ import annotations

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import DataError

METRIC_SERIES = (
    "lr",
    "gan_d",
    "gan_g_teacher",
    "gan_g_student",
    "fea",
    "sty",
    "per",
    "dcd",
    "total_student",
)

ABLATION_COLUMNS = ("combo", "lambda_overrides", "seed", "steps", "desk_fid", "status")


def read_jsonl(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: malformed JSON on line {lineno}: {e}") from None
    if not records:
        raise DataError(f"{path}: no records")
    return records


def _save_series(steps, values, ylabel, out_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_metrics(metrics_path, out_dir, evals_path=None):
    """One curve image per tracked series, plus a desk-FID curve when evals exist."""
    records = read_jsonl(metrics_path)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for key in METRIC_SERIES:
        if not any(key in r for r in records):
            continue
        pts = [(r["step"], r[key]) for r in records if key in r]
        out_path = os.path.join(out_dir, f"{key}.png")
        _save_series([p[0] for p in pts], [p[1] for p in pts], key, out_path)
        written.append(out_path)
    if evals_path and os.path.exists(evals_path):
        evals = read_jsonl(evals_path)
        pts = [(r["step"], r["desk_fid"]) for r in evals if "desk_fid" in r]
        if pts:
            out_path = os.path.join(out_dir, "desk_fid.png")
            _save_series([p[0] for p in pts], [p[1] for p in pts], "desk-FID", out_path)
            written.append(out_path)
    return written


# ---------------------------------------------------------------------------
# Ablation output


def write_ablation_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ABLATION_COLUMNS})


def render_ablation_table(rows) -> str:
    headers = ("combo", "lambda overrides", "seed", "steps", "desk-FID", "status")
    cells = [headers]
    for r in rows:
        fid = r["desk_fid"]
        fid_s = f"{fid:.4f}" if isinstance(fid, float) and math.isfinite(fid) else "-"
        cells.append(
            (str(r["combo"]), str(r["lambda_overrides"]), str(r["seed"]), str(r["steps"]), fid_s, str(r["status"]))
        )
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def plot_ablation(rows, out_path):
    labels = [r["combo"] + (f" [{r['lambda_overrides']}]" if r["lambda_overrides"] else "") for r in rows]
    values = [
        r["desk_fid"] if isinstance(r["desk_fid"], float) and math.isfinite(r["desk_fid"]) else 0.0
        for r in rows
    ]
    fig, ax = plt.subplots(figsize=(8, 0.5 * len(rows) + 2))
    ax.barh(range(len(rows)), values)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("desk-FID (lower is better)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path
