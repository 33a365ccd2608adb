"""Figure rendering for CLI reports.

Every report path writes its figures next to the machine-readable output.
Rendering uses the Agg backend so it works headless; figures are regular
PNGs on disk, nothing is shown interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .metrics import MetricsReport

_FIG_DPI = 120


def label_palette(num_labels: int) -> np.ndarray:
    """Fixed distinct colors for label ids 1..L; id 0 (background) is gray."""
    base = plt.get_cmap("tab20")
    colors = np.zeros((num_labels + 1, 3))
    colors[0] = (0.82, 0.82, 0.82)
    for i in range(1, num_labels + 1):
        colors[i] = base(((i - 1) * 2 % 20 + (0 if i <= 10 else 1)) / 20)[:3]
    return colors


def colorize_labels(label_map: np.ndarray, num_labels: int) -> np.ndarray:
    colors = (label_palette(num_labels) * 255).astype(np.uint8)
    return colors[label_map]


def save_label_png(label_map: np.ndarray, path: str | Path) -> None:
    """Raw label map PNG: pixel value equals label id."""
    Image.fromarray(label_map.astype(np.uint8), mode="L").save(path)


def save_parse_figure(
    image: np.ndarray,
    label_map: np.ndarray,
    label_names: list[str],
    confidence: np.ndarray,
    visible: np.ndarray,
    path: str | Path,
) -> None:
    """Query image beside the colorized parse, with a per-label legend."""
    num_labels = len(label_names)
    colors = label_palette(num_labels)
    fig, axes = plt.subplots(1, 2, figsize=(7.2, 3.6), dpi=_FIG_DPI)
    axes[0].imshow(image)
    axes[0].set_title("query")
    axes[1].imshow(colorize_labels(label_map, num_labels))
    axes[1].set_title("parse")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    handles = [
        plt.Rectangle((0, 0), 1, 1, facecolor=colors[i + 1])
        for i in range(num_labels)
        if visible[i + 1]
    ]
    labels = [
        f"{name} ({confidence[i + 1]:.2f})"
        for i, name in enumerate(label_names)
        if visible[i + 1]
    ]
    if handles:
        fig.legend(handles, labels, loc="lower center", ncol=min(4, len(handles)),
                   frameon=False, fontsize=8)
        fig.subplots_adjust(bottom=0.22)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def save_training_curves(logs, path: str | Path) -> None:
    """Train/validation loss curves with the lr schedule on a twin axis."""
    epochs = [r.epoch for r in logs]
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=_FIG_DPI)
    ax.plot(epochs, [r.train_loss for r in logs], label="train loss", color="#1f77b4")
    ax.plot(epochs, [r.val_loss for r in logs], label="validation loss", color="#d62728")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.lr for r in logs], label="learning rate",
             color="#7f7f7f", linestyle="--", alpha=0.7)
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    lines, names = ax.get_legend_handles_labels()
    lines2, names2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, names + names2, loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_metrics_chart(report: MetricsReport, path: str | Path) -> None:
    """Horizontal per-label F1 bars plus the overall average."""
    names = [s.name for s in report.per_label]
    f1 = [s.f1 * 100 for s in report.per_label]
    fig, ax = plt.subplots(figsize=(6.4, 0.45 * len(names) + 1.6), dpi=_FIG_DPI)
    ypos = np.arange(len(names))
    ax.barh(ypos, f1, color="#1f77b4")
    ax.axvline(report.avg_f1 * 100, color="#d62728", linestyle="--",
               label=f"avg F1 {report.avg_f1 * 100:.1f}%")
    ax.set_yticks(ypos, names)
    ax.invert_yaxis()
    ax.set_xlabel("F1 (%)")
    ax.set_xlim(0, 100)
    ax.grid(axis="x", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_variant_chart(rows: list[tuple[str, MetricsReport]], path: str | Path) -> None:
    """Average F1 per architecture variant, one bar each."""
    names = [name for name, _ in rows]
    f1 = [rep.avg_f1 * 100 for _, rep in rows]
    fig, ax = plt.subplots(figsize=(6.4, 0.5 * len(names) + 1.4), dpi=_FIG_DPI)
    ypos = np.arange(len(names))
    ax.barh(ypos, f1, color="#2ca02c")
    ax.set_yticks(ypos, names)
    ax.invert_yaxis()
    ax.set_xlabel("average F1 (%)")
    ax.set_xlim(0, 100)
    ax.grid(axis="x", alpha=0.3)
    for y, v in zip(ypos, f1):
        ax.text(v + 1, y, f"{v:.1f}", va="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
