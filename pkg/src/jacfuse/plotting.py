"""Report figures rendered to files with the non-interactive Agg backend."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import CLASS_NAMES  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_learning_curves(curves: dict[str, Sequence[dict]], path, xlabel: str = "epoch") -> None:
    """Loss and accuracy against epoch for each named curve."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, rows in curves.items():
        x = [r["epoch"] for r in rows]
        ax_loss.plot(x, [r["loss"] for r in rows], label=name)
        ax_acc.plot(x, [r["accuracy"] for r in rows], label=name)
        if rows and "val_accuracy" in rows[0]:
            ax_acc.plot(x, [r["val_accuracy"] for r in rows], "--", label=f"{name} (val)")
    ax_loss.set(xlabel=xlabel, ylabel="loss")
    ax_acc.set(xlabel=xlabel, ylabel="accuracy", ylim=(0, 1.05))
    ax_acc.legend(fontsize=7)
    _save(fig, path)


def plot_class_bars(report, path) -> None:
    """Per-class sensitivity and specificity bars; undefined rates are left blank."""
    x = np.arange(len(CLASS_NAMES))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    sens = np.nan_to_num(report.sensitivity, nan=0.0)
    spec = np.nan_to_num(report.specificity, nan=0.0)
    ax.bar(x - 0.2, sens, 0.4, label="sensitivity")
    ax.bar(x + 0.2, spec, 0.4, label="specificity")
    ax.set_xticks(x, CLASS_NAMES)
    ax.set(ylim=(0, 1.05), title=f"{report.name} per-class rates")
    ax.legend(loc="lower right")
    _save(fig, path)


def plot_confusion(cm: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center")
    ax.set_xticks(range(len(CLASS_NAMES)), CLASS_NAMES, rotation=30)
    ax.set_yticks(range(len(CLASS_NAMES)), CLASS_NAMES)
    ax.set(xlabel="predicted", ylabel="actual", title=title)
    _save(fig, path)


def plot_ablation(reports, path) -> None:
    names = [r.name for r in reports]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for off, key in ((-0.25, "macro_sensitivity"), (0.0, "macro_specificity"), (0.25, "accuracy")):
        ax.bar(x + off, [getattr(r, key) for r in reports], 0.25, label=key.replace("macro_", ""))
    ax.set_xticks(x, names)
    ax.set(ylim=(0, 1.05), title="ablation")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)
