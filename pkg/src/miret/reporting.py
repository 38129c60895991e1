"""Report rendering: fixed-width tables, CSV files and matplotlib figures.

Every report path writes the delimited data first and renders the matching
figure next to it; figures go straight to files (Agg backend, no display).
"""

from __future__ import annotations

import csv
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def fixed_width_table(headers: Sequence[str], rows: Sequence[Sequence], width: int = 14) -> str:
    def fmt(cell) -> str:
        if isinstance(cell, float):
            return f"{cell:.4f}"
        return str(cell)

    lines = ["".join(f"{h:<{width}}" for h in headers)]
    lines.append("-" * (width * len(headers)))
    for row in rows:
        lines.append("".join(f"{fmt(c):<{width}}" for c in row))
    return "\n".join(lines)


def write_csv(path: str, headers: Sequence[str], rows: Sequence[Sequence]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        writer.writerows(rows)


def plot_training_curves(metrics: Sequence[dict], path: str) -> None:
    """Loss and in-batch accuracy against step, rendered to ``path``."""
    steps = [m["step"] for m in metrics]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [m["loss"] for m in metrics], lw=0.8)
    ax1.set_xlabel("step")
    ax1.set_ylabel("training loss")
    ax2.plot(steps, [m["accuracy"] for m in metrics], lw=0.8, color="tab:orange")
    ax2.set_xlabel("step")
    ax2.set_ylabel("in-batch accuracy")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_hit_rate(report: dict, path: str) -> None:
    cutoffs = report["cutoffs"]
    values = [report["hit_rate"][str(k)] for k in cutoffs]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(cutoffs, values, marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("K")
    ax.set_ylabel("HR@K")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(axis: str, values: Sequence, series: dict[str, Sequence[float]], path: str) -> None:
    """One curve per metric over the sweep axis (numeric or categorical)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = range(len(values))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", label=label)
    ax.set_xticks(list(x))
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(axis)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
