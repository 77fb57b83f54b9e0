"""Figures rendered next to the delimited run outputs.

Curves follow the usual convention for regularization plots: thin lines are
training error, bold lines test error, one colour per run.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from densedrop.train import read_metrics  # noqa: E402

CURVE_FIELDS = ("epoch", "train_loss", "train_err", "test_err", "lr", "seconds")

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def write_curve_csv(run_dir, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in read_metrics(run_dir):
            w.writerow([getattr(r, f) for f in CURVE_FIELDS])
    return path


def plot_curves(runs: Dict[str, Path], path, title: str = "") -> Path:
    """Train/test error per epoch for each labelled run directory."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for idx, (label, run_dir) in enumerate(runs.items()):
        recs = read_metrics(run_dir)
        epochs = [r.epoch for r in recs]
        color = f"C{idx}"
        ax.plot(epochs, [r.train_err for r in recs], color=color, lw=0.8, alpha=0.8)
        ax.plot(epochs, [r.test_err for r in recs], color=color, lw=2.0, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("error (%)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_table(labels: Sequence[str], train_err: Sequence[float], test_err: Sequence[float], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 0.5 + 0.45 * len(labels)))
    ys = range(len(labels))
    ax.barh([y + 0.2 for y in ys], test_err, height=0.4, label="test", color="C0")
    ax.barh([y - 0.2 for y in ys], train_err, height=0.4, label="train", color="C1", alpha=0.6)
    ax.set_yticks(list(ys))
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlabel("final-epoch error (%)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
