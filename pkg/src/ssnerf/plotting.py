"""Figures written next to evaluation and training outputs (file-only, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imaging import PALETTE  # noqa: E402
from .properties import Kind  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def to_display(kind: Kind, data) -> np.ndarray:
    """RGB-displayable array for any property image."""
    d = np.asarray(data, dtype=np.float64)
    if kind is Kind.SL:
        return PALETTE[np.argmax(d, axis=-1) % len(PALETTE)] / 255.0
    if kind is Kind.SN:
        return np.clip((d + 1.0) / 2.0, 0, 1)
    if d.shape[-1] == 1:
        return np.repeat(np.clip(d, 0, 1), 3, axis=-1)
    return np.clip(d, 0, 1)


def view_grid(dataset, view: int, prediction: dict, path) -> Path:
    """Two rows (ground truth, prediction), one column per property."""
    kinds = [k for k in Kind if k in prediction and k in dataset.images]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, len(kinds), figsize=(1.6 * len(kinds), 3.4), squeeze=False)
        for j, k in enumerate(kinds):
            pred = prediction[k]
            pred = pred.data if hasattr(pred, "data") else pred
            for i, img in enumerate((dataset.images[k][view], pred)):
                ax = axes[i, j]
                ax.imshow(to_display(k, img), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(k.value.upper())
        axes[0, 0].set_ylabel("truth")
        axes[1, 0].set_ylabel("predicted")
        fig.suptitle(f"view {view}")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def metric_bars(reports: Sequence, path) -> Path:
    """One panel per property comparing the headline metric across reports."""
    kinds = [k for k in (Kind.SL, Kind.SN, Kind.SH, Kind.KP, Kind.ED) if any(k in r.per_property for r in reports)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(kinds)), figsize=(1.9 * max(1, len(kinds)), 2.2), squeeze=False)
        for ax, k in zip(axes[0], kinds):
            vals = [r.per_property.get(k, np.nan) for r in reports]
            ax.bar(range(len(reports)), vals, color=[f"C{i}" for i in range(len(reports))])
            ax.set_xticks(range(len(reports)))
            ax.set_xticklabels([r.label or f"#{i}" for i, r in enumerate(reports)], rotation=30, ha="right")
            ax.set_title(f"{k.value.upper()} ({'mIoU' if k is Kind.SL else 'L1'})")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def loss_curves(records: Sequence[dict], path, smooth: int = 25) -> Path:
    """Per-property training losses on a log scale, smoothed with a running mean."""
    steps = np.array([r["step"] for r in records])
    names = list(records[0]["losses"]) if records else []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for name in names:
            y = np.array([r["losses"][name] for r in records], dtype=np.float64)
            if smooth > 1 and len(y) >= smooth:
                y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
                x = steps[smooth - 1:]
            else:
                x = steps
            ax.plot(x, np.maximum(y, 1e-12), label=name, lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("batch loss (sum over rays)")
        if names:
            ax.legend(frameon=False, ncol=2)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
