"""Report figures: training curves, test scatter, error histogram, slice sensitivity.

Figures are built on bare :class:`matplotlib.figure.Figure` objects (no
pyplot state) and written as SVG. Output is byte-stable for identical
inputs: the SVG id salt is fixed and no date is embedded.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .metrics import DEFAULT_HIST_WIDTH, error_histogram

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
WIDTH = 5.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "cdslice",
    "svg.fonttype": "path",
}

REFERENCE_LINE_ID = "reference-y-equals-x"
HISTOGRAM_ID = "error-histogram"


def _figure(height_ratio: float = GOLDEN) -> tuple[Figure, object]:
    fig = Figure(figsize=(WIDTH, WIDTH * height_ratio))
    ax = fig.add_subplot(1, 1, 1)
    return fig, ax


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_loss_curve(epochs, losses, path) -> Path:
    with matplotlib.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(epochs, losses, color="#2b8cbe", marker="o", markersize=2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss (Smooth L1)")
        if len(losses) and min(losses) > 0:
            ax.set_yscale("log")
        ax.set_title("Training loss")
        return _save(fig, path)


def plot_val_r2(epochs, r2, path, best_epoch: int | None = None) -> Path:
    with matplotlib.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(epochs, r2, color="#08589e", marker="o", markersize=2, label="validation $R^2$")
        if best_epoch is not None:
            best = r2[list(epochs).index(best_epoch)]
            ax.axvline(best_epoch, color="#d95f02", linestyle="--", linewidth=0.8,
                       label=f"best: epoch {best_epoch} ($R^2$={best:.4f})")
            ax.legend(loc="lower right")
        ax.set_xlabel("epoch")
        ax.set_ylabel("$R^2$")
        ax.set_title("Validation $R^2$")
        return _save(fig, path)


def plot_scatter(truths, predictions, path) -> Path:
    truths = np.asarray(truths, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    lo = float(min(truths.min(), predictions.min()))
    hi = float(max(truths.max(), predictions.max()))
    pad = 0.05 * (hi - lo) if hi > lo else 0.01
    with matplotlib.rc_context(STYLE):
        fig, ax = _figure(height_ratio=1.0)
        ax.scatter(truths, predictions, s=8, alpha=0.7, color="#2b8cbe", edgecolors="none")
        (ref,) = ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="k", linestyle="--", linewidth=0.8, label="$y = x$")
        ref.set_gid(REFERENCE_LINE_ID)
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_aspect("equal")
        ax.set_xlabel("true $C_d$")
        ax.set_ylabel("predicted $C_d$")
        ax.legend(loc="upper left")
        ax.set_title("Predicted vs true")
        return _save(fig, path)


def plot_error_histogram(errors, path, bin_width: float = DEFAULT_HIST_WIDTH) -> Path:
    """Histogram of signed errors (predicted - true) on a ``bin_width`` grid."""
    errors = np.asarray(errors, dtype=float)
    edges, counts = error_histogram(errors, bin_width)
    with matplotlib.rc_context(STYLE):
        fig, ax = _figure()
        bars = ax.bar(edges[:-1], counts, width=bin_width, align="edge", color="#7bccc4", edgecolor="#08589e", linewidth=0.5)
        for i, patch in enumerate(bars):
            patch.set_gid(f"{HISTOGRAM_ID}-{i}")
        ax.axvline(0.0, color="k", linewidth=0.8)
        ax.set_xlabel(f"prediction error (bin width {bin_width:g})")
        ax.set_ylabel("count")
        ax.set_title("Error distribution")
        return _save(fig, path)


def plot_sensitivity(deltas, path) -> Path:
    deltas = np.asarray(deltas, dtype=float)
    with matplotlib.rc_context(STYLE):
        fig, ax = _figure()
        idx = np.arange(len(deltas))
        colors = np.where(deltas >= 0, "#d95f02", "#2b8cbe")
        ax.bar(idx, deltas, color=colors, width=0.85)
        ax.axhline(0.0, color="k", linewidth=0.8)
        ax.set_xlabel("slice (front to rear)")
        ax.set_ylabel(r"$\Delta C_d$ when slice removed")
        ax.set_title("Slice occlusion sensitivity")
        return _save(fig, path)
