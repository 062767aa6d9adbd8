"""Search-run reporting: reward curves and token sampling proportions.

Writes plot-ready CSV tables plus rendered PNG figures into a report
directory. Proportion tables carry one row per candidate window and an
overall row; every row is a distribution summing to one.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .genotype import (AGG_NAMES, N_AGGS, N_INPUT_SLOTS, N_OPS, OP_NAMES,
                       SLOT_NAMES, TOKENS_PER_STEP)
from .search import RunLog

DEFAULT_WINDOW = 10


def _token_columns(depth: int):
    """Column labels per category; index tokens may address aggregates."""
    n_index = N_INPUT_SLOTS + depth - 1
    index_names = list(SLOT_NAMES) + [f"agg{i}" for i in range(depth - 1)]
    return {"inputs": index_names[:n_index],
            "ops": list(OP_NAMES)[:N_OPS],
            "aggregations": list(AGG_NAMES)[:N_AGGS]}


def count_tokens(records, depth: int):
    """Raw token counts per category over a set of records."""
    counts = {"inputs": np.zeros(N_INPUT_SLOTS + depth - 1, dtype=np.int64),
              "ops": np.zeros(N_OPS, dtype=np.int64),
              "aggregations": np.zeros(N_AGGS, dtype=np.int64)}
    for r in records:
        for step in range(depth):
            in1, in2, op1, op2, agg = r.tokens[TOKENS_PER_STEP * step:
                                               TOKENS_PER_STEP * (step + 1)]
            counts["inputs"][in1] += 1
            counts["inputs"][in2] += 1
            counts["ops"][op1] += 1
            counts["ops"][op2] += 1
            counts["aggregations"][agg] += 1
    return counts


def proportion_rows(log: RunLog, window: int = DEFAULT_WINDOW):
    """(label, {category: distribution}) rows: per window plus overall."""
    depth = len(log.records[0].tokens) // TOKENS_PER_STEP
    rows = []
    for start in range(0, len(log.records), window):
        chunk = log.records[start:start + window]
        counts = count_tokens(chunk, depth)
        rows.append((f"{start}-{start + len(chunk) - 1}",
                     {k: v / v.sum() for k, v in counts.items()}))
    overall = count_tokens(log.records, depth)
    rows.append(("all", {k: v / v.sum() for k, v in overall.items()}))
    return rows


def moving_average(values, window: int = DEFAULT_WINDOW):
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo:i + 1])))
    return out


def write_report(log: RunLog, out_dir: Path,
                 window: int = DEFAULT_WINDOW) -> list[Path]:
    """Emit reward_curve.csv/png and per-category proportion csv/png."""
    if not log.records:
        raise ValueError("empty run log")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    rewards = [r.reward for r in log.records]
    avg = moving_average(rewards, window)
    curve_path = out_dir / "reward_curve.csv"
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "reward", "moving_avg", "status"])
        for r, m in zip(log.records, avg):
            w.writerow([r.index, repr(r.reward), repr(m), r.status])
    written.append(curve_path)

    depth = len(log.records[0].tokens) // TOKENS_PER_STEP
    columns = _token_columns(depth)
    rows = proportion_rows(log, window)
    for category in ("ops", "aggregations", "inputs"):
        path = out_dir / f"proportions_{category}.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["candidates"] + columns[category])
            for label, dists in rows:
                w.writerow([label] + [repr(v) for v in dists[category]])
        written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([r.index for r in log.records], rewards, ".", alpha=0.45,
            label="candidate reward")
    ax.plot([r.index for r in log.records], avg, "-",
            label=f"moving average ({window})")
    ax.set_xlabel("candidate")
    ax.set_ylabel("reward")
    ax.legend()
    fig.tight_layout()
    curve_png = out_dir / "reward_curve.png"
    fig.savefig(curve_png, dpi=120)
    plt.close(fig)
    written.append(curve_png)

    overall = rows[-1][1]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for ax, category in zip(axes, ("ops", "aggregations", "inputs")):
        ax.bar(range(len(overall[category])), overall[category])
        ax.set_xticks(range(len(overall[category])))
        ax.set_xticklabels(columns[category], rotation=60, fontsize=7,
                           ha="right")
        ax.set_title(f"sampling proportion: {category}")
    fig.tight_layout()
    prop_png = out_dir / "sampling_proportions.png"
    fig.savefig(prop_png, dpi=120)
    plt.close(fig)
    written.append(prop_png)
    return written
