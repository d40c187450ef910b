"""Figures for toy-experiment results.

Figures are built with the object API (no pyplot state), so nothing here
depends on an interactive backend.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

__all__ = ["figure", "plot_loss_curves", "plot_metric_bars", "plot_alpha", "write_figures"]

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
METRICS = (("unknown_recall", "U-R"), ("aose", "AOSE"), ("map_known", "mAP"), ("hacc", "HAcc"))


def figure(width: float = 6.0, height: float | None = None, ncols: int = 1):
    fig = Figure(figsize=(width, height or width * GOLDEN), facecolor="w")
    axes = fig.subplots(1, ncols, squeeze=False)[0]
    for ax in axes:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, axes


def _modes(results):
    seen = []
    for r in results:
        if r["mode"] not in seen:
            seen.append(r["mode"])
    return seen


def plot_loss_curves(results, path, key: str = "total"):
    """Mean training loss per mode, with a band over seeds."""
    fig, (ax,) = figure()
    for mode in _modes(results):
        runs = [r for r in results if r["mode"] == mode]
        steps = np.array(runs[0]["train"]["steps"])
        curves = np.array([r["train"]["losses"][key] for r in runs])
        mean = curves.mean(0)
        line, = ax.plot(steps, mean, label=mode, lw=1.2)
        if len(runs) > 1:
            ax.fill_between(steps, curves.min(0), curves.max(0), color=line.get_color(), alpha=0.15)
    ax.set_xlabel("step")
    ax.set_ylabel(f"{key} loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_metric_bars(results, path):
    """Per-seed open-world metrics, one panel per metric, grouped by mode."""
    modes = _modes(results)
    fig, axes = figure(width=10.0, height=3.0, ncols=len(METRICS))
    for ax, (field, label) in zip(axes, METRICS):
        for i, mode in enumerate(modes):
            vals = [r["report"][field] for r in results if r["mode"] == mode]
            vals = np.array([np.nan if v is None else v for v in vals], dtype=float)
            ax.bar(i, np.nanmean(vals) if np.any(np.isfinite(vals)) else 0.0,
                   color="0.85", edgecolor="0.3", width=0.7)
            ax.plot(np.full(len(vals), i) + np.linspace(-0.2, 0.2, len(vals)), vals,
                    "o", ms=3, color="k")
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels(modes, rotation=30, ha="right", fontsize=8)
        ax.set_title(label, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def plot_alpha(results, path):
    """Learned coupling strengths per node, averaged over seeds, per mode."""
    modes = _modes(results)
    names = sorted(results[0]["alpha"])
    fig, (ax,) = figure(width=8.0)
    width = 0.8 / max(len(modes), 1)
    x = np.arange(len(names))
    for i, mode in enumerate(modes):
        runs = [r for r in results if r["mode"] == mode]
        mean = [np.mean([r["alpha"][n] for r in runs]) for n in names]
        ax.bar(x + i * width, mean, width, label=mode)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("alpha")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def write_figures(results, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_loss_curves(results, out / "loss.png"),
        plot_metric_bars(results, out / "metrics.png"),
        plot_alpha(results, out / "alpha.png"),
    ]
