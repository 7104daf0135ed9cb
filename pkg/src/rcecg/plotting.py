"""
Figures written next to the CSV outputs. Uses the non-interactive Agg backend.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("acc", "se", "p", "f1")
# no software/date stamps so reruns produce identical files
_SAVE = {"metadata": {"Software": None}, "dpi": 110}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_activations(time_s: np.ndarray, u: np.ndarray, neurons: np.ndarray, neuron_ids: Sequence[int],
                     outputs: np.ndarray, labels: Sequence[str], path, title: str = "") -> Path:
    """Input trace, a few reservoir neurons and the readout outputs on a shared time axis."""
    fig, axes = plt.subplots(3, 1, figsize=(10, 7), sharex=True)
    axes[0].plot(time_s, u, lw=0.7, color="k")
    axes[0].set_ylabel("input (mV)")
    for trace, i in zip(neurons, neuron_ids):
        axes[1].plot(time_s, trace, lw=0.7, label=f"x{i}")
    axes[1].set_ylabel("activation")
    axes[1].legend(loc="upper right", fontsize=7, ncol=len(neuron_ids))
    for trace, lab in zip(outputs, labels):
        axes[2].plot(time_s, trace, lw=0.7, label=lab)
    axes[2].set_ylabel("output")
    axes[2].set_xlabel("time (s)")
    axes[2].legend(loc="upper right", fontsize=7, ncol=max(1, len(labels)))
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def _bars(ax, rows, names):
    x = np.arange(len(rows))
    width = 0.8 / len(METRICS)
    for k, m in enumerate(METRICS):
        vals = [0.0 if math.isnan(r[m]) else r[m] for r in rows]
        ax.bar(x + (k - 1.5) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, ncol=4, loc="lower right")


def plot_metrics(rows: Sequence[dict], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    _bars(ax, rows, [r["class"] for r in rows])
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(rows) + 2), 4))
    _bars(ax, rows, [f"{r['record']} {r['class']}" for r in rows])
    ax.set_title("per-record test metrics")
    fig.tight_layout()
    return _save(fig, path)
