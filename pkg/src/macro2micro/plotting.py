"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "svg.hashsalt": "macro2micro",
}


def new_figure(ncols=1, width=4.0, height=3.0):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def save(fig, path, formats=("png",)):
    """Write ``fig`` once per format (``path`` suffix is replaced) and close it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        for fmt in formats:
            out = path.with_suffix("." + fmt)
            fig.savefig(out, format=fmt, metadata={"Software": None} if fmt == "png" else None)
            written.append(out)
    plt.close(fig)
    return written


def plot_loss_curve(records, path, window=10):
    fig, (ax,) = new_figure(width=5.0)
    steps = np.array([r["step"] for r in records])
    for key in ("loss_total", "loss_pix", "loss_perct", "loss_gan", "loss_patch"):
        vals = np.array([r[key] for r in records], dtype=float)
        if len(vals) >= window:
            vals = np.convolve(vals, np.ones(window) / window, mode="valid")
            xs = steps[window - 1:]
        else:
            xs = steps
        ax.plot(xs, vals, label=key.replace("loss_", ""), lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss ({window}-step mean)")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_distance_profile(rows, path):
    """One panel per metric against slice offset from the centre."""
    fig, axes = new_figure(ncols=4, width=2.6, height=2.4)
    offsets = [r.offset for r in rows]
    for ax, (attr, label) in zip(axes, [("ssim", "SSIM"), ("psnr_db", "PSNR (dB)"),
                                        ("mae", "MAE"), ("mse", "MSE")]):
        ax.plot(offsets, [getattr(r.whole, attr) for r in rows], "o-", ms=3, label="whole")
        if any(r.wm is not None for r in rows):
            ax.plot(offsets, [getattr(r.wm, attr) if r.wm else np.nan for r in rows], "s--",
                    ms=3, label="FA > 0.2")
        ax.set_xlabel("offset from centre (slices)")
        ax.set_ylabel(label)
    axes[0].legend(frameon=False)
    return save(fig, path)


def plot_pca(embedding, path):
    fig, (ax,) = new_figure(width=4.2, height=3.6)
    for name, xy in embedding.coordinates.items():
        ax.scatter(xy[:, 0], xy[:, 1], s=8, alpha=0.6, label=name)
    evr = embedding.explained_variance_ratio
    ax.set_xlabel(f"PC1 ({100 * evr[0]:.1f}%)")
    ax.set_ylabel(f"PC2 ({100 * evr[1]:.1f}%)")
    if embedding.matched_distance is not None:
        ax.set_title(f"matched distance {embedding.matched_distance:.3f}")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_slice_panel(images, titles, path):
    fig, axes = new_figure(ncols=len(images), width=2.2, height=2.4)
    for ax, img, title in zip(axes, images, titles):
        ax.imshow(np.asarray(img).T, cmap="gray", vmin=0, vmax=1, origin="lower")
        ax.set_title(title)
        ax.axis("off")
    return save(fig, path)
