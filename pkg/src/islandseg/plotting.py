"""Figures for sweep reports: score vs training-set size and IoU vs epoch."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

VARIANT_COLORS = ["tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple", "tab:brown"]


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def score_vs_size(series: dict[str, list[tuple[int, float]]], metric: str, path) -> Path:
    """One line per variant; x = training-set size, y = score."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, (name, pts) in enumerate(series.items()):
            pts = sorted(pts)
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", ms=4, color=VARIANT_COLORS[i % len(VARIANT_COLORS)], label=name)
        ax.set_xlabel("Training dataset size (images)")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} vs training dataset size")
        if series:
            ax.legend(frameon=False)
        return _save(fig, path)


def iou_vs_epoch(curves: dict[int, list[float]], variant: str, path, best: dict[int, int] | None = None) -> Path:
    """Validation IoU per epoch, one curve per training-set size; best epochs marked."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        cmap = plt.get_cmap("viridis", max(len(curves), 2))
        for i, (size, ious) in enumerate(sorted(curves.items())):
            epochs = range(1, len(ious) + 1)
            ax.plot(epochs, ious, color=cmap(i), lw=1.2, label=f"{size} images")
            if best and size in best:
                e = best[size]
                ax.plot([e], [ious[e - 1]], marker="*", color=cmap(i), ms=7)
        ax.set_xlabel("Epoch")
        ax.set_ylabel("Validation IoU")
        ax.set_title(f"{variant}: IoU over epochs")
        if curves:
            ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def mask_panel(image_rgb, gt, pred, path, title: str = "") -> Path:
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.7))
        for ax, img, name in zip(axes, (image_rgb, gt, pred), ("Image", "Ground truth", "Prediction")):
            ax.imshow(img, cmap=None if img.ndim == 3 else "gray", interpolation="nearest")
            ax.set_title(name)
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        return _save(fig, path)
