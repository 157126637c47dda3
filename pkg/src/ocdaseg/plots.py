"""Diagnostic figures written by the CLI after each phase."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def loss_curves(history, path, keys=None, title="training loss"):
    """Line plot of selected loss fields over steps."""
    if not history:
        return
    steps = [h["step"] for h in history]
    keys = keys or [k for k in history[0] if k != "step"]
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in keys:
        ax.plot(steps, [h[k] for h in history], label=k, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def reliable_fraction_plot(events, path):
    """Reliable-sample fraction at each re-clustering event."""
    if not events:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([e["step"] for e in events], [e["reliable_fraction"] for e in events],
            marker="o")
    ax.set_xlabel("step")
    ax.set_ylabel("reliable fraction")
    ax.set_ylim(0, 1.05)
    ax.set_title("confident style assignments over training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def patch_gallery(images, path, ncols=6, titles=None):
    """Image montage (list of (H, W, 3) arrays in [0, 1])."""
    if not images:
        return
    n = len(images)
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols, 1.6 * nrows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for i, img in enumerate(images):
        axes[i].imshow(np.clip(img, 0, 1))
        if titles:
            axes[i].set_title(titles[i], fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_bars(table, path, metric="pq"):
    """Grouped bars of one metric per variant and split."""
    variants = list(table)
    splits = sorted({s for v in table.values() for s in v})
    x = np.arange(len(variants))
    width = 0.8 / max(len(splits), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(variants) + 2, 4))
    for j, split in enumerate(splits):
        vals = [table[v].get(split, {}).get(metric, 0.0) for v in variants]
        ax.bar(x + j * width, vals, width, label=split)
    ax.set_xticks(x + width * (len(splits) - 1) / 2)
    ax.set_xticklabels(variants, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} by variant")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
