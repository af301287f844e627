"""Figure rendering for the reporting paths (eval and ablate-views).

Figures are written next to the delimited output; the Agg backend keeps
this headless-safe.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_ablation_figure(rows, path) -> None:
    """Metric curves against the number of views."""
    views = [r["views"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for metric, marker in (("OA", "o"), ("mAcc", "s"), ("mIoU", "^")):
        ax.plot(views, [r[metric] for r in rows], marker=marker, label=metric)
    ax.set_xlabel("number of views")
    ax.set_ylabel("percent")
    ax.set_xticks(views)
    ax.set_ylim(0, 105)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_confusion_figure(counts: np.ndarray, class_names, path) -> None:
    """Row-normalized confusion heatmap; last row/column is 'other'."""
    counts = np.asarray(counts, dtype=np.float64)
    names = list(class_names) + ["other"]
    row_sums = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, row_sums, out=np.zeros_like(counts), where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(names), 0.8 + 0.6 * len(names)))
    im = ax.imshow(shares, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
