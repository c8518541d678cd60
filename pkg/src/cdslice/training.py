"""Loss, optimizer and the training loop with best-validation-R^2 selection."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError, NumericError, ParameterError
from .geometry import SliceTensor
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, ModelParams, forward, predict_many, save_params

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_mse", "val_mae", "val_r2", "val_maxae", "seconds")


def smooth_l1(y, y_hat, beta: float = 1.0) -> Tensor:
    """Mean Smooth L1 (Huber) loss between targets ``y`` and predictions ``y_hat``.

    Per sample: ``0.5 d**2`` if ``|d| < beta`` else ``beta * (|d| - 0.5 beta)``
    with ``d = y - y_hat``. Differentiable in ``y_hat``.
    """
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.value.dtype).reshape(y_hat.shape)
    d = y_hat.value - y
    a = np.abs(d)
    quadratic = a < beta
    per_sample = np.where(quadratic, 0.5 * d * d, beta * (a - 0.5 * beta))
    n = max(per_sample.size, 1)
    value = np.asarray(per_sample.mean(), dtype=y_hat.value.dtype)

    def backward(g):
        return (g * np.where(quadratic, d, beta * np.sign(d)) / n,)

    return ad.record_op("smooth_l1", (y_hat,), value, backward)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    beta: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    checkpoint_dir: str | None = None
    clip_norm: float | None = None
    eval_batch_size: int = 16

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size >= 1 and self.epochs >= 0 and self.beta > 0):
            raise ParameterError("learning_rate, batch_size and beta must be positive, epochs non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_epsilon > 0):
            raise ParameterError("Adam betas must lie in [0, 1) and epsilon be positive")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises:
        NumericError: some gradient holds a NaN or infinity; nothing is
            updated in that case.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter section {name!r}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_epsilon)


@dataclass
class SliceDataset:
    """Stacked, equally padded slice tensors with their Cd labels."""

    data: np.ndarray  # (n, S, M, 2)
    mask: np.ndarray  # (n, S, M)
    targets: np.ndarray  # (n,)
    ids: list[str]

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def from_slices(cls, slices: Sequence[SliceTensor], targets, ids: Sequence[str] | None = None) -> "SliceDataset":
        targets = np.asarray(targets, dtype=np.float64)
        if len(slices) != len(targets):
            raise InputError(f"{len(slices)} samples but {len(targets)} labels")
        if not slices:
            return cls(np.zeros((0, 1, 1, 2), np.float32), np.zeros((0, 1, 1), bool), targets, [])
        m = max(s.m_max for s in slices)
        padded = [s.padded_to(m) for s in slices]
        data = np.stack([s.data for s in padded])
        mask = np.stack([s.mask for s in padded])
        ids = list(ids) if ids is not None else [s.source_id for s in slices]
        return cls(data, mask, targets, ids)

    def subset(self, index) -> "SliceDataset":
        index = np.asarray(index, dtype=np.int64)
        return SliceDataset(self.data[index], self.mask[index], self.targets[index], [self.ids[i] for i in index])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float
    val_r2: float
    val_maxae: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch with the highest validation R^2 (earliest on ties).

        R^2 is undefined (NaN) when the validation labels have no spread, e.g.
        a one-sample split; if no epoch has a defined R^2 the lowest
        validation MSE decides instead.
        """
        scored = [(rec.val_r2, rec.epoch) for rec in self.epochs if not math.isnan(rec.val_r2)]
        if scored:
            return max(scored, key=lambda t: (t[0], -t[1]))[1]
        if not self.epochs:
            return None
        return min(self.epochs, key=lambda rec: (rec.val_mse, rec.epoch)).epoch

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.epochs:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(LOG_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise InputError(f"{path}: training log lacks columns {sorted(missing)}")
            rows = [
                EpochRecord(int(row["epoch"]), *(float(row[c]) for c in LOG_COLUMNS[1:]))
                for row in reader
            ]
        return cls(rows)


def standardized_config(config: ModelConfig, targets) -> ModelConfig:
    """``config`` with target scaling set to the mean and std of ``targets``."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise InputError("cannot standardize against an empty label set")
    scale = float(targets.std())
    return replace(config, target_mean=float(targets.mean()), target_scale=scale if scale > 0 else 1.0)


def evaluate(dataset: SliceDataset, params: ModelParams, batch_size: int = 16) -> MetricsReport:
    """Inference (dropout off) over ``dataset`` and its regression metrics."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty split")
    preds = predict_many(params, dataset.data, dataset.mask, batch_size)
    return compute_metrics(dataset.targets, preds)


def _clip_(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale


def _checkpoint(params: ModelParams, directory: str | None, name: str) -> None:
    if directory is not None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        save_params(params, Path(directory) / name)


def train(
    train_set: SliceDataset,
    val_set: SliceDataset,
    params: ModelParams,
    config: TrainConfig,
) -> tuple[ModelParams, TrainLog]:
    """Fit ``params`` in place; return a copy of the best-validation params and the log.

    Every epoch shuffles the training split with a generator seeded by
    ``(seed, epoch)``, runs mini-batches (the last may be short) of forward,
    Smooth L1, backward and Adam, then scores the validation split. The loss
    compares labels and predictions on the model's standardized scale,
    ``(cd - target_mean) / target_scale``, which is plain Cd by default. When
    ``config.checkpoint_dir`` is set, ``best.cdpm`` is rewritten whenever
    validation R^2 improves (see :attr:`TrainLog.best_epoch`) and
    ``final.cdpm`` is written at the end.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("training and validation splits must be non-empty")
    logbook = TrainLog()
    best = params.copy()
    state = OptimizerState()
    names = list(params.tensors)
    values = {n: params[n].value for n in names}
    n = len(train_set)
    mc = params.config
    scaled_targets = (train_set.targets - mc.target_mean) / mc.target_scale
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        losses = []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo: lo + config.batch_size]
            params.zero_grad()
            with ad.Tape() as tape:
                pred = forward(
                    params, train_set.data[idx], train_set.mask[idx], training=True, rng=drop_rng, standardized=True
                )
                loss = smooth_l1(scaled_targets[idx], pred, config.beta)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            grads = {k: params[k].grad for k in names}
            if config.clip_norm is not None:
                _clip_({k: g for k, g in grads.items() if g is not None}, config.clip_norm)
            adam_step(values, grads, state, config)
            losses.append(value * len(idx))
        report = evaluate(val_set, params, config.eval_batch_size)
        r2 = report.r_squared if report.r_squared is not None else math.nan
        rec = EpochRecord(
            epoch, sum(losses) / n, report.mse, report.mae, r2, report.max_ae, time.perf_counter() - start
        )
        logbook.epochs.append(rec)
        log.info(
            "epoch %d  loss %.6g  val mae %.4g  val r2 %.4f  (%.1fs)", epoch, rec.train_loss, rec.val_mae, r2, rec.seconds
        )
        if logbook.best_epoch == epoch:
            best = params.copy()
            _checkpoint(best, config.checkpoint_dir, "best.cdpm")
    if config.epochs > 0:
        _checkpoint(params, config.checkpoint_dir, "final.cdpm")
    return best, logbook


def gradcheck_model(
    config,
    seed: int = 0,
    n_samples: int = 2,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    training: bool = True,
) -> ad.GradCheckReport:
    """Finite-difference check of d(Smooth L1 loss)/d(every parameter).

    Builds random slice stacks (one slice always empty) for ``config`` and
    compares reverse-mode gradients against central differences. With
    ``training`` the dropout masks are redrawn from the same seed on every
    evaluation, so the checked function stays fixed.
    """
    from .model import init_params

    rng = np.random.default_rng(seed)
    S, M = config.n_slices, config.m_max
    data = rng.uniform(-1.0, 1.0, size=(n_samples, S, M, 2))
    counts = rng.integers(1, M + 1, size=(n_samples, S))
    counts[:, 0] = 0
    mask = np.arange(M) < counts[..., None]
    data = np.where(mask[..., None], data, 0.0)
    targets = rng.uniform(0.2, 0.4, size=n_samples)
    params = init_params(config, seed)

    def loss_fn():
        drop = np.random.default_rng([seed, 99])
        pred = forward(params, data, mask, training=training, rng=drop)
        return smooth_l1(targets, pred)

    return ad.check_gradients(loss_fn, params.tensors, epsilon=epsilon, tolerance=tolerance)
