"""Figure rendering for run artifacts.

Every function writes a PNG next to the delimited output it illustrates.
The Agg backend is forced and the PNG software tag is pinned so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError, InputError

_PNG_META = {"Software": "mmunlearn"}
_DPI = 110


def _save(fig, path: str) -> None:
    fig.savefig(path, format="png", dpi=_DPI, metadata=_PNG_META,
                bbox_inches="tight")
    plt.close(fig)


def save_heatmap_figure(heatmap, path: str) -> None:
    """Stage-by-task grid of forget-slice visual accuracy."""
    n = heatmap.n_stages
    grid = np.full((n, n), np.nan)
    for s, row in enumerate(heatmap.grid):
        for t, cell in enumerate(row):
            if cell is not None:
                grid[s, t] = cell
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * n, 1.0 + 0.7 * n))
    masked = np.ma.masked_invalid(grid)
    im = ax.imshow(masked, vmin=0.0, vmax=1.0, cmap="viridis")
    for s in range(n):
        for t in range(s + 1):
            ax.text(t, s, f"{grid[s, t]:.2f}", ha="center", va="center",
                    color="white", fontsize=8)
    ax.set_xticks(range(n), [f"task {t + 1}" for t in range(n)])
    ax.set_yticks(range(n), [f"stage {s + 1}" for s in range(n)])
    ax.set_title("Forget visual accuracy per task after each stage")
    fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)


def save_curves_figure(curves_csv: str, path: str) -> None:
    """Per-stage trajectories from the continual curves table."""
    rows = list(csv.DictReader(io.StringIO(curves_csv)))
    if not rows:
        raise InputError("save_curves_figure: empty curves table")
    stages = [int(r["stage"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for key, label in (("cumulative_forget_vqa", "forget (cumulative)"),
                       ("retain_vqa", "retain"),
                       ("rw_vqa", "real-world"),
                       ("retain_qa", "retain QA")):
        ax.plot(stages, [float(r[key]) for r in rows], marker="o", label=label)
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy")
    ax.set_xticks(stages)
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("Visual accuracy across sequential forgetting stages")
    _save(fig, path)


def save_loss_figure(epoch_losses, path: str) -> None:
    """Per-epoch loss decomposition of one unlearning run."""
    if not epoch_losses:
        raise InputError("save_loss_figure: no epochs recorded")
    epochs = range(1, len(epoch_losses) + 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for key in ("push", "pull", "ret", "gum", "total"):
        if any(key in e for e in epoch_losses):
            ax.plot(epochs, [e.get(key, 0.0) for e in epoch_losses],
                    label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=8)
    ax.set_title("Loss decomposition")
    _save(fig, path)


def save_sweep_figure(sweep_csv: str, path: str) -> None:
    """Metric trends over the swept weights.

    Rows that failed (non-empty error column) are skipped. The x axis is
    the weight column with the most distinct values; remaining weight
    columns distinguish the line groups.
    """
    rows = [r for r in csv.DictReader(io.StringIO(sweep_csv)) if not r["error"]]
    if not rows:
        raise ContractError("save_sweep_figure: no successful sweep cells")
    weight_cols = ("alpha", "beta", "lam")
    x_col = max(weight_cols, key=lambda c: len({r[c] for r in rows}))
    group_cols = [c for c in weight_cols if c != x_col]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    groups = sorted({tuple(r[c] for c in group_cols) for r in rows})
    for group in groups:
        members = sorted((float(r[x_col]), r) for r in rows
                         if tuple(r[c] for c in group_cols) == group)
        xs = [x for x, _ in members]
        suffix = ""
        if len(groups) > 1:
            suffix = " @" + ",".join(f"{c}={v}" for c, v in zip(group_cols, group))
        for metric, style in (("forget_vqa", "-"), ("retain_vqa", "--"),
                              ("rw_vqa", ":")):
            ax.plot(xs, [float(r[metric]) for _, r in members], style,
                    marker=".", label=metric + suffix)
    ax.set_xlabel(x_col)
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=7)
    ax.set_title(f"Slice accuracy vs {x_col}")
    _save(fig, path)
