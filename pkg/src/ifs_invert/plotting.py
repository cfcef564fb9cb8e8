"""Report figures written straight to files (no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")  # files only, never a window

import matplotlib.pyplot as plt
import numpy as np

PARAMS = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "lines.linewidth": 1.0,
    "figure.dpi": 120,
}


def _save(fig, path, dpi=150):
    fig.tight_layout()
    # a fixed metadata block keeps repeated runs byte-comparable
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)


def plot_history(history, path, title: str | None = None) -> None:
    """Loss components (log scale) and temperature over iterations; SA phases marked."""
    it = np.array([r.iteration for r in history])
    with plt.rc_context(PARAMS):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for name, label in (("total", "total"), ("mse_ms", "multi-scale MSE"), ("dssim", "D-SSIM"),
                            ("reg", "regulariser")):
            vals = np.array([getattr(r, name) for r in history], dtype=float)
            if np.any(vals > 0):
                ax.plot(it, np.where(vals > 0, vals, np.nan), label=label)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        sa = [r.iteration for r in history if r.sa_accepts is not None and r.sa_accepts > 0]
        for x in sa:
            ax.axvline(x, color="0.8", lw=0.5, zorder=0)
        ax2 = ax.twinx()
        ax2.plot(it, [r.temperature for r in history], color="k", ls="--", lw=0.8, label="temperature")
        ax2.set_ylabel("temperature")
        ax2.set_ylim(0, 1.05)
        h1, l1 = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(h1 + h2, l1 + l2, loc="upper right", frameon=False)
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_comparison(target, rendering, path, title: str | None = None) -> None:
    """Input, reconstruction and their signed difference side by side."""
    target = np.asarray(target, dtype=float)
    rendering = np.asarray(rendering, dtype=float)
    with plt.rc_context(PARAMS):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
        axes[0].imshow(target, cmap="gray_r", vmin=0, vmax=1)
        axes[0].set_title("input")
        axes[1].imshow(rendering, cmap="gray_r", vmin=0, vmax=1)
        axes[1].set_title("recovered")
        im = axes[2].imshow(rendering - target, cmap="RdBu_r", vmin=-1, vmax=1)
        axes[2].set_title("recovered - input")
        fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
        for a in axes:
            a.set_xticks([])
            a.set_yticks([])
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_eval_report(report, path) -> None:
    """Per-view metric distributions plus per-fractal mean F1."""
    rows = report.rows
    with plt.rc_context(PARAMS):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        names = ["f1", "iou", "ssim"]
        data = [[getattr(r, n) for r in rows] for n in names]
        ax1.boxplot(data, tick_labels=["F1", "IoU", "SSIM"])
        ax1.set_ylim(-0.02, 1.02)
        ax1.set_title(f"{len(rows)} views")
        frac = sorted({r.fractal for r in rows})
        f1 = [np.mean([r.f1 for r in rows if r.fractal == k]) for k in frac]
        ax2.bar(frac, f1, color="0.4")
        ax2.set_xlabel("fractal")
        ax2.set_ylabel("mean F1")
        ax2.set_ylim(0, 1)
        _save(fig, path)


def plot_views(images, path, labels=None) -> None:
    """A row of rendered views, e.g. a zoom sequence."""
    n = len(images)
    with plt.rc_context(PARAMS):
        fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6), squeeze=False)
        for k, (a, img) in enumerate(zip(axes[0], images)):
            a.imshow(img, cmap="gray_r", vmin=0, vmax=1)
            a.set_xticks([])
            a.set_yticks([])
            if labels is not None:
                a.set_title(labels[k])
        _save(fig, path)
