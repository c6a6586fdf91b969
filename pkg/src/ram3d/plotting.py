"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_LOSS_KEYS = ("hifa", "recon", "vgg", "depth", "total")


def plot_losses(history, path, title=""):
    """Loss curves from a trainer history [(step, {name: value})]."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.array([s for s, _ in history])
    for key in _LOSS_KEYS:
        vals = np.array([p.get(key, 0.0) for _, p in history], dtype=float)
        if np.any(vals != 0):
            ax.plot(steps, vals, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_report(report, path):
    """Grouped bars of direction similarity and consistency per report row."""
    rows = report.rows
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r.dir_similarity for r in rows], 0.4, label="direction similarity")
    ax.bar(x + 0.2, [r.dir_consistency for r in rows], 0.4, label="direction consistency")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{r.scene}\n{r.prompt_tgt}"[:40] for r in rows], fontsize=7)
    ax.axhline(0, color="k", lw=0.5)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_contact_sheet(images, path, ncols=6):
    """Tile float RGB frames in [0, 1] into one figure."""
    n = len(images)
    ncols = min(ncols, n)
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.6 * ncols, 1.6 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, img in zip(axes.ravel(), images):
        ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
