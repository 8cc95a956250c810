"""Report figures rendered straight to files (Agg backend, no display needed)."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from .fiberquant import GroupStats  # noqa: E402
from .trainer import EvalReport, History  # noqa: E402

log = logging.getLogger(__name__)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    log.info("wrote %s", path)
    return path


def training_curves(history: History, path) -> Path:
    """Accuracy, validation AUC and loss against epoch, one panel each."""
    epochs = history.column("epoch")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    ax_acc, ax_auc, ax_loss = axes
    ax_acc.plot(epochs, history.column("train_acc"), label="train")
    ax_acc.plot(epochs, history.column("val_acc"), label="validation")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(loc="lower right")
    ax_auc.plot(epochs, history.column("val_auc"), color="C2")
    ax_auc.set_ylabel("validation macro AUC")
    ax_auc.set_ylim(0, 1.02)
    ax_loss.plot(epochs, history.column("train_loss"), label="train")
    ax_loss.plot(epochs, history.column("val_loss"), label="validation")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend(loc="upper right")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.grid(alpha=0.3)
    if history.best_epoch is not None:
        for ax in axes:
            ax.axvline(history.best_epoch, color="0.5", ls=":", lw=1)
    fig.tight_layout()
    return _save(fig, path)


def coherency_boxplot(stats: Mapping[str, GroupStats], groups: Mapping[str, Sequence[float]], path) -> Path:
    """Box plot drawn from precomputed summaries so whiskers match the CSV exactly."""
    boxes = []
    for name, s in stats.items():
        vals = np.asarray(groups[name], dtype=float)
        boxes.append({
            "label": name, "med": s.median, "q1": s.q1, "q3": s.q3, "mean": s.mean,
            "whislo": s.whisker_lo, "whishi": s.whisker_hi,
            "fliers": vals[(vals < s.whisker_lo) | (vals > s.whisker_hi)],
        })
    fig, ax = plt.subplots(figsize=(1.2 * len(boxes) + 2, 3.8))
    ax.bxp(boxes, showmeans=True)
    ax.set_ylabel("coherency")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def confusion_matrix(report: EvalReport, path) -> Path:
    cm = np.asarray(report.confusion_matrix)
    names = list(report.class_names)
    fig, ax = plt.subplots(figsize=(5, 4.4))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.max() / 2 if cm.size else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, int(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
