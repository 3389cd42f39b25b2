"""Matplotlib figure rendering for training and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(log_lines, path: str | Path, title: str = "training loss"):
    """log_lines: iterable of (step, lr, loss)."""
    steps = [s for s, _, _ in log_lines]
    losses = [v for _, _, v in log_lines]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_bars(metrics: dict[str, float], path: str | Path,
                     title: str = "evaluation metrics"):
    names = list(metrics)
    vals = [metrics[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), vals, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_gamma_grid(results: dict[tuple[float, float], dict[str, float]],
                    metric_names: list[str], path: str | Path):
    """Heatmap per metric over the (gamma_v, gamma_a) grid."""
    gvs = sorted({gv for gv, _ in results})
    gas = sorted({ga for _, ga in results})
    n = len(metric_names)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.5), squeeze=False)
    for ax, name in zip(axes[0], metric_names):
        mat = np.full((len(gvs), len(gas)), np.nan)
        for i, gv in enumerate(gvs):
            for j, ga in enumerate(gas):
                mat[i, j] = results[(gv, ga)].get(name, np.nan)
        im = ax.imshow(mat, origin="lower", cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(gas)), [f"{g:g}" for g in gas])
        ax.set_yticks(range(len(gvs)), [f"{g:g}" for g in gvs])
        ax.set_xlabel("gamma_a")
        ax.set_ylabel("gamma_v")
        ax.set_title(name, fontsize=9)
        for i in range(len(gvs)):
            for j in range(len(gas)):
                if np.isfinite(mat[i, j]):
                    ax.text(j, i, f"{mat[i, j]:.3f}", ha="center", va="center",
                            color="white", fontsize=8)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
