"""Figure rendering for command outputs.

Every entry point takes data plus an output path, renders with the Agg
backend (no display needed), writes a PNG, and returns the path.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, out_path: str) -> str:
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_sweep(results, out_path: str) -> str:
    """Validation IoU versus augmentation size, with per-trial train IoUs."""
    sizes = [r.size for r in results]
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in results:
        ax.scatter([r.size] * len(r.trials), r.trials, color="#b0b0b0", s=18,
                   zorder=1, label="_trials")
        ax.scatter([r.size], [r.trials[r.selected]], color="#1f77b4", s=30,
                   zorder=2, label="_selected")
    ax.plot(sizes, [r.val_iou for r in results], "o-", color="#d62728",
            label="validation IoU (selected)")
    ax.set_xlabel("augmentation size")
    ax.set_ylabel("IoU@0.5")
    ax.set_title("Augmentation sweep")
    ax.grid(alpha=0.3)
    ax.legend(loc="best")
    return _finish(fig, out_path)


def plot_training_log(log_path: str, out_path: str) -> str:
    """One panel per logged series (loss components and learning rate)."""
    records = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValueError(f"report: empty training log {log_path}")
    iters = [r["iter"] for r in records]
    keys = [k for k in records[0] if k != "iter"]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3.2))
    if len(keys) == 1:
        axes = [axes]
    for ax, key in zip(axes, keys):
        ax.plot(iters, [r[key] for r in records], lw=1.0)
        ax.set_xlabel("iteration")
        ax.set_title(key)
        ax.grid(alpha=0.3)
    return _finish(fig, out_path)


def plot_pair_montage(pairs, out_path: str, max_pairs: int = 8) -> str:
    """Image patches on the top row, their masks below."""
    if len(pairs) == 0:
        raise ValueError("report: no pairs to plot")
    show = pairs[:max_pairs]
    fig, axes = plt.subplots(2, len(show), figsize=(1.6 * len(show), 3.4), squeeze=False)
    for col, p in enumerate(show):
        axes[0][col].imshow(np.asarray(p.x), cmap="gray")
        axes[1][col].imshow(np.asarray(p.y), cmap="viridis", vmin=0.0, vmax=1.0)
        for row in (0, 1):
            axes[row][col].set_xticks([])
            axes[row][col].set_yticks([])
    axes[0][0].set_ylabel("patch")
    axes[1][0].set_ylabel("mask")
    return _finish(fig, out_path)


def plot_eval_bars(iou_by_split: dict, out_path: str) -> str:
    """Per-split IoU bars."""
    splits = list(iou_by_split)
    vals = [iou_by_split[s] for s in splits]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(splits, vals, color="#1f77b4", width=0.55)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=9)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("IoU@0.5")
    ax.set_title("Segmentation evaluation")
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, out_path)
