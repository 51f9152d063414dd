"""Matplotlib figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp/version metadata, so identical inputs give identical files
PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_training_curves(rows, path):
    """Loss terms per epoch (left) and validation macro-F1 (right)."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("total", "cls", "seg_dice", "seg_bce", "sal"):
        ax1.plot(epochs, [r[key] for r in rows], label=key, lw=1.2)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax1.legend(fontsize=7, frameon=False)
    ax2.plot(epochs, [r["val_f1"] for r in rows], color="k", lw=1.2)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation macro F1")
    ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows, path):
    names = [r["Configuration"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.27
    ax.bar(x - width, [r["Accuracy"] / 100.0 for r in rows], width, label="Accuracy")
    ax.bar(x, [r["F1"] for r in rows], width, label="F1")
    ax.bar(x + width, [r["IoU"] for r in rows], width, label="IoU")
    ax.set_xticks(x)
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, frameon=False, ncol=3, loc="upper left")
    fig.tight_layout()
    return _save(fig, path)


def plot_saliency_panel(images, saliencies, path, titles=None):
    """Originals on the top row, their saliency maps underneath."""
    n = len(images)
    fig, axes = plt.subplots(2, n, figsize=(2 * n, 4.2), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(np.clip(np.asarray(images[i])[..., :3], 0, 1))
        axes[1, i].imshow(saliencies[i], cmap="gray", vmin=0, vmax=1)
        if titles:
            axes[0, i].set_title(titles[i], fontsize=8)
        for ax in axes[:, i]:
            ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)
