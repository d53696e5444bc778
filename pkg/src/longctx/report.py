"""Delimited reports and the figures rendered alongside them.

Every report is a plain CSV with the header row first; a PNG rendered from
the same rows is written next to it with the same stem.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_csv(path, fieldnames, rows) -> None:
    """Write dict rows under an explicit header, header line first."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def save_bench_figure(rows, path) -> None:
    """Per-repetition wall time with the median marked; metadata in the title."""
    timed = [r for r in rows if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(7, 4))
    if timed:
        reps = [int(r["rep"]) for r in timed]
        times = [float(r["wall_time_s"]) for r in timed]
        ax.bar(reps, times, color="#4878a8")
        ax.axhline(sorted(times)[len(times) // 2], color="#b04030", linestyle="--",
                   label="median")
        ax.legend()
        first = timed[0]
        ax.set_title(
            f"prefill {first['head']} head, L={first['seq_len']}, "
            f"{first['workers']} worker(s), {first['transport']}\n"
            f"peak logit rows {first['peak_logit_rows']}, "
            f"head flops {first['head_flops']}, cv {float(first['cv_wall_time']):.3f}"
        )
    else:
        ax.set_title("no timed repetitions (over budget)")
    ax.set_xlabel("repetition")
    ax.set_ylabel("wall time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_capacity_figure(rows, path) -> None:
    """Maximum context per worker count, one line per head strategy."""
    fig, ax = plt.subplots(figsize=(7, 4))
    strategies = sorted({r["strategy"] for r in rows})
    for strategy in strategies:
        picked = sorted(
            (int(r["workers"]), int(r["max_context"])) for r in rows
            if r["strategy"] == strategy
        )
        ax.plot([p[0] for p in picked], [p[1] for p in picked], marker="o",
                label=f"{strategy} head")
    ax.set_xlabel("workers")
    ax.set_ylabel("max context (tokens)")
    ax.set_title("context capacity under a fixed per-worker budget")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def coefficient_of_variation(values) -> float:
    """Population standard deviation over the mean; zero for a single value."""
    values = list(values)
    mean = sum(values) / len(values)
    if mean == 0:
        return 0.0
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return math.sqrt(var) / mean
