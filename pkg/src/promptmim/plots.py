"""Report figures rendered to SVG files alongside the delimited output.

SVG output is byte-deterministic: the hash salt is pinned, and the
date metadata is suppressed, so re-rendering a report reproduces
identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "promptmim"

import matplotlib.pyplot as plt  # noqa: E402


def save_svg(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def sweep_figure(points: Sequence[tuple], axis: str, path: str | Path,
                 title: str | None = None) -> Path:
    """Line plot of the harmonic mean against one swept hyperparameter."""
    xs = list(range(len(points)))
    labels = [str(v) for v, _ in points]
    ys = [h for _, h in points]
    fig, ax = plt.subplots(figsize=(5.0, 3.2), constrained_layout=True)
    ax.plot(xs, ys, marker="o", color="#2a6f97")
    ax.set_xticks(xs, labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("harmonic mean (%)")
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    return save_svg(fig, path)


def method_gain_figure(families: Sequence, baseline: Sequence[float],
                       candidate: Sequence[float], metric: str,
                       baseline_name: str, candidate_name: str,
                       path: str | Path) -> Path:
    """Per-family gain bars of one method over another (new-class analogue)."""
    gains = [c - b for b, c in zip(baseline, candidate)]
    xs = list(range(len(families)))
    colors = ["#2a9d8f" if g >= 0 else "#e76f51" for g in gains]
    fig, ax = plt.subplots(figsize=(6.0, 3.2), constrained_layout=True)
    ax.bar(xs, gains, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(xs, [f"family {f}" for f in families])
    ax.set_ylabel(f"{metric} gain (pp)")
    ax.set_title(f"{candidate_name} minus {baseline_name}")
    return save_svg(fig, path)


def training_curve_figure(log_rows: Sequence[dict], path: str | Path,
                          title: str | None = None) -> Path:
    """Loss components over training steps from one tuning log."""
    steps = [r["step"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6.0, 3.2), constrained_layout=True)
    ax.plot(steps, [r["total"] for r in log_rows], label="total",
            color="#264653", linewidth=0.9)
    ax.plot(steps, [r["ce"] for r in log_rows], label="ce",
            color="#2a9d8f", linewidth=0.9, alpha=0.8)
    if any(r["kg"] for r in log_rows):
        ax.plot(steps, [r["kg"] for r in log_rows], label="kg",
                color="#e9c46a", linewidth=0.9, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    if title:
        ax.set_title(title)
    return save_svg(fig, path)
