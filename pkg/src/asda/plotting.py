"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def savefig(fig, path):
    fig.tight_layout()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training(history, path, title: str | None = None):
    """Train/validation loss per epoch, learning rate on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ep = [h.epoch for h in history]
        ax.plot(ep, [h.train_loss for h in history], "o-", ms=3, label="train")
        ax.plot(ep, [h.val_loss for h in history], "s-", ms=3, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        ax2 = ax.twinx()
        ax2.plot(ep, [h.lr for h in history], color="0.6", lw=1, ls="--")
        ax2.set_ylabel("learning rate", color="0.4")
        ax2.grid(False)
        ax.legend(loc="upper right", frameon=False)
        if title:
            ax.set_title(title)
        return savefig(fig, path)


def plot_ablation(rows, axis: str, path, metrics=("map_m", "map_h")):
    """Bar chart of mAP per setting."""
    labels = [str(r["setting"]) for r in rows]
    x = np.arange(len(rows))
    metrics = [m for m in metrics if any(r.get(m) is not None for r in rows)]
    width = 0.8 / max(1, len(metrics))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(rows) + 1.5), 3.2))
        for n, m in enumerate(metrics):
            vals = [np.nan if r.get(m) is None else r[m] for r in rows]
            ax.bar(x + (n - (len(metrics) - 1) / 2) * width, vals, width, label=m.replace("map_", "mAP ").upper())
        ax.set_xticks(x, labels)
        ax.set_xlabel(axis)
        ax.set_ylabel("mAP")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, fontsize=8)
        return savefig(fig, path)


def plot_semantic_maps(image, maps, path, theta: float | None = None):
    image = np.asarray(image)
    maps = np.asarray(maps)
    k = maps.shape[0]
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axs = plt.subplots(1, k + 1, figsize=(2.2 * (k + 1), 2.4))
        axs[0].imshow(np.clip(image, 0, 1))
        axs[0].set_title("image")
        for i in range(k):
            im = axs[i + 1].imshow(maps[i], vmin=0, vmax=1, cmap="magma")
            title = f"m{i + 1}"
            if theta is not None:
                title += f"  ({(maps[i] >= theta).mean():.0%} >= {theta:g})"
            axs[i + 1].set_title(title)
        for a in axs:
            a.set_xticks([])
            a.set_yticks([])
        fig.colorbar(im, ax=list(axs[1:]), shrink=0.8)
        fig.savefig(path, bbox_inches="tight", dpi=STYLE["savefig.dpi"])
        plt.close(fig)
        return path
