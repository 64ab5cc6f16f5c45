"""Figures written next to the tabular outputs."""

from __future__ import annotations

import math
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
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    """Training/validation loss and DSC per epoch; best epoch marked."""
    epochs = np.arange(1, len(history) + 1)
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        ax1.plot(epochs, history.train_loss, label="train")
        if not all(math.isnan(v) for v in history.val_loss):
            ax1.plot(epochs, history.val_loss, label="validation")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("dice loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, history.train_dsc, label="train")
        if not all(math.isnan(v) for v in history.val_dsc):
            ax2.plot(epochs, history.val_dsc, label="validation")
        if history.best_epoch >= 0:
            ax2.axvline(history.best_epoch + 1, color="0.6", ls=":", lw=1)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("DSC")
        ax2.set_ylim(0, 1)
        ax2.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_cv_summary(report, path) -> Path:
    """Cross-fold mean with standard-deviation bars, one group per metric."""
    from .metrics import METRICS

    means = [report.summary[m][0] for m in METRICS]
    stds = [report.summary[m][1] for m in METRICS]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 2.6))
        x = np.arange(len(METRICS))
        ax.bar(x, np.nan_to_num(means), yerr=np.nan_to_num(stds), color="0.55", capsize=3)
        ax.set_xticks(x, [m.upper() for m in METRICS])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(f"mean over {len(report.folds)} fold(s)")
        fig.tight_layout()
        return _save(fig, path)


def plot_prediction(image: np.ndarray, prob: np.ndarray, mask: np.ndarray | None, path, threshold: float = 0.5) -> Path:
    """Input, probability map and binarized contour (plus ground truth if given)."""
    panels = 3 if mask is None else 4
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, panels, figsize=(2.2 * panels, 2.3))
        axes[0].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[0].set_title("image")
        axes[1].imshow(prob, cmap="magma", vmin=0, vmax=1)
        axes[1].set_title("probability")
        axes[2].imshow(image, cmap="gray", vmin=0, vmax=1)
        axes[2].contour(prob >= threshold, levels=[0.5], colors="c", linewidths=1)
        axes[2].set_title("prediction")
        if mask is not None:
            axes[3].imshow(mask, cmap="gray", vmin=0, vmax=1)
            axes[3].set_title("ground truth")
        for ax in axes:
            ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, path)
