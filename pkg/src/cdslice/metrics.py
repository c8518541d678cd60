"""Regression metrics for drag prediction: MSE, MAE, R^2, MaxAE."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

DEFAULT_HIST_WIDTH = 0.005


@dataclass
class MetricsReport:
    mse: float
    mae: float
    r_squared: float | None  # None when the truths have zero variance
    max_ae: float
    n: int
    truths: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)
    hist_edges: np.ndarray = field(repr=False)
    hist_counts: np.ndarray = field(repr=False)

    @property
    def errors(self) -> np.ndarray:
        """Signed residuals, predicted minus true."""
        return self.predictions - self.truths

    def summary(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "r_squared": self.r_squared, "max_ae": self.max_ae, "n": self.n}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")

    def write_samples_csv(self, path: str | Path, ids: Sequence[str] | None = None) -> None:
        ids = list(ids) if ids is not None else [str(i) for i in range(self.n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "true", "predicted", "error"])
            for sid, t, p in zip(ids, self.truths.tolist(), self.predictions.tolist()):
                w.writerow([sid, repr(t), repr(p), repr(p - t)])

    def write_histogram_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lower", "upper", "count"])
            for lo, hi, c in zip(self.hist_edges[:-1].tolist(), self.hist_edges[1:].tolist(), self.hist_counts.tolist()):
                w.writerow([repr(lo), repr(hi), c])


def error_histogram(errors: np.ndarray, bin_width: float = DEFAULT_HIST_WIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Histogram on a grid of multiples of ``bin_width`` covering all errors."""
    if bin_width <= 0:
        raise InputError(f"histogram bin width must be positive, got {bin_width}")
    lo = math.floor(errors.min() / bin_width)
    hi = math.floor(errors.max() / bin_width) + 1
    edges = np.arange(lo, hi + 1) * bin_width
    counts, _ = np.histogram(errors, bins=edges)
    return edges, counts


def compute_metrics(truths, predictions, hist_width: float = DEFAULT_HIST_WIDTH) -> MetricsReport:
    y = np.asarray(truths, dtype=np.float64).reshape(-1)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if y.size != p.size:
        raise InputError(f"{y.size} truths but {p.size} predictions")
    if y.size == 0:
        raise InputError("cannot compute metrics on an empty set")
    resid = p - y
    abs_resid = np.abs(resid)
    mse = float(np.mean(resid * resid))
    mae = float(np.mean(abs_resid))
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else None
    edges, counts = error_histogram(resid, hist_width)
    return MetricsReport(mse, mae, r2, float(abs_resid.max()), int(y.size), y, p, edges, counts)
