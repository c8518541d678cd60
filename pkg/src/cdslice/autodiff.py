"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of operations the drag predictor needs are provided. Ops
executed while a :class:`Tape` is active (and with at least one input that
requires a gradient) are recorded; ``Tape.backward`` replays them in reverse.
Outside a tape every op is a plain numpy computation, which is how inference
runs.

Numeric precision is a process-wide setting (``f32`` or ``f64``). Tensors are
cast to the active dtype on construction and a tape refuses to record values
of a different dtype.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, ParameterError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = "f32"


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise ParameterError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the numeric mode."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """Dense array with an optional gradient slot.

    ``grad`` is allocated lazily by the backward pass and always has the
    shape of ``value``. ``tape_id`` is the index of the op that produced the
    tensor on its tape, or ``None`` for leaves and untracked values.
    """

    __slots__ = ("value", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tapes: list["Tape"] = []


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    A tape is single-use and single-threaded: build it during one forward
    pass, call :meth:`backward` once on the scalar loss.
    """

    def __init__(self) -> None:
        self.ops: list[Op] = []
        self.dtype = get_dtype()
        self.visits = 0

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, name, inputs, value, backward) -> Tensor:
        if value.dtype != self.dtype:
            raise NumericError(
                f"op {name!r} produced {value.dtype} on a {np.dtype(self.dtype).name} tape"
            )
        out = Tensor(value, requires_grad=True)
        out.tape_id = len(self.ops)
        self.ops.append(Op(name, tuple(inputs), out, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor."""
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id is None or loss.tape_id >= len(self.ops) or self.ops[loss.tape_id].output is not loss:
            raise ParameterError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.value)
        for op in reversed(self.ops[: loss.tape_id + 1]):
            self.visits += 1
            g = op.output.grad
            if g is None:
                continue
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.value.dtype).reshape(inp.shape)
                else:
                    inp.grad += gi


def _tape_for(inputs: Sequence[Tensor]) -> Tape | None:
    if not _active_tapes:
        return None
    if any(t.requires_grad for t in inputs):
        return _active_tapes[-1]
    return None


def record_op(name: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
    """Wrap ``value`` as the output of a differentiable op.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input. Used by the ops below and by modules defining their own ops.
    """
    tape = _tape_for(inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(name, inputs, value, backward)


# Hook used by check_gradients to notice when a perturbation crosses a
# ReLU zero or changes a max-pool winner.
_kink_trace: list[np.ndarray] | None = None


def _trace(arr: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append(arr)


# --------------------------------------------------------------------- ops


def _rowwise_matmul(rows: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # A stacked (1, k) @ (k, n) product computes every row with the same
    # kernel, so a row's result never depends on its neighbours or on how
    # many rows there are. Plain 2-D gemm does not guarantee that.
    return (rows[:, None, :] @ weight.T)[:, 0, :]


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` applied over all leading dims of ``x``."""
    if weight.value.ndim != 2 or x.value.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    out_dim, in_dim = weight.shape
    if bias is not None and bias.shape != (out_dim,):
        raise DimensionError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
    lead = x.shape[:-1]
    rows = x.value.reshape(-1, in_dim)
    y = _rowwise_matmul(rows, weight.value)
    if bias is not None:
        y = y + bias.value
    y = y.reshape(lead + (out_dim,))

    def backward(g):
        g2 = g.reshape(-1, out_dim)
        gx = (g2 @ weight.value).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ rows if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("affine", inputs, y, backward)


def relu(x: Tensor) -> Tensor:
    active = x.value > 0
    _trace(active)
    y = np.where(active, x.value, 0).astype(x.value.dtype)
    return record_op("relu", (x,), y, lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.value)
    return record_op("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def tanh_act(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    return record_op("tanh", (x,), t, lambda g: (g * (1 - t * t),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return record_op("add", (a, b), a.value + b.value, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return record_op("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def masked_max_pool(x: Tensor, mask, include_padding: bool = False) -> Tensor:
    """Channel-wise max over the point axis (``-2``) restricted to ``mask``.

    ``x`` has shape ``(..., M, d)`` and ``mask`` ``(..., M)``. Rows with a
    zero mask are ignored; a set with no real rows pools to zeros. Each
    channel's gradient goes to a single winning row, the lowest index on
    ties. ``include_padding`` pools over every row regardless of the mask.
    """
    xv = x.value
    mask = np.asarray(mask, dtype=bool)
    if xv.ndim < 2 or mask.shape != xv.shape[:-1]:
        raise DimensionError(f"masked_max_pool: mask {mask.shape} does not match input {xv.shape}")
    if xv.shape[-2] < 1:
        raise DimensionError("masked_max_pool: need at least one row")
    if include_padding:
        mask = np.ones_like(mask)
    masked = np.where(mask[..., None], xv, -np.inf)
    idx = np.argmax(masked, axis=-2)[..., None, :]
    out = np.take_along_axis(xv, idx, axis=-2)[..., 0, :]
    empty = ~mask.any(axis=-1)
    if empty.any():
        out = np.where(empty[..., None], 0, out).astype(xv.dtype)
    _trace(idx)

    def backward(g):
        g = np.where(empty[..., None], 0, g)
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, idx, g[..., None, :], axis=-2)
        return (gx,)

    return record_op("masked_max_pool", (x,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ndim = tensors[0].value.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.value.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.value for t in tensors], axis=ax)
    return record_op("concat", tensors, y, lambda g: np.split(g, bounds, axis=ax))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("stack: nothing to stack")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes {sorted(shapes)} disagree")
    y = np.stack([t.value for t in tensors], axis=axis)
    ax = axis % y.ndim
    n = len(tensors)
    return record_op(
        "stack", tensors, y, lambda g: [np.take(g, i, axis=ax) for i in range(n)]
    )


def narrow(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous sub-range ``[start, stop)`` along ``axis``."""
    ax = axis % x.value.ndim
    index = [slice(None)] * x.value.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[index] = g
        return (gx,)

    return record_op("narrow", (x,), x.value[index], backward)


def select(x: Tensor, i: int, axis: int = 0) -> Tensor:
    """Drop ``axis`` by picking entry ``i`` along it."""
    ax = axis % x.value.ndim

    def backward(g):
        gx = np.zeros_like(x.value)
        index = [slice(None)] * x.value.ndim
        index[ax] = i
        gx[tuple(index)] = g
        return (gx,)

    return record_op("select", (x,), np.take(x.value, i, axis=ax), backward)


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    y = np.asarray(x.value.mean(), dtype=x.value.dtype)
    return record_op("mean", (x,), y, lambda g: (np.full_like(x.value, g / n),))


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.value.dtype) / x.value.dtype.type(1 - rate)
    return record_op("dropout", (x,), x.value * keep, lambda g: (g * keep,))


# ------------------------------------------------------- gradient checking


@dataclass
class SectionCheck:
    name: str
    size: int
    checked: int
    excluded: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    sections: list[SectionCheck] = field(default_factory=list)
    tolerance: float = 1e-4
    epsilon: float = 1e-5

    @property
    def max_rel_error(self) -> float:
        return max((s.max_rel_error for s in self.sections), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def format_table(self) -> str:
        width = max([len("section")] + [len(s.name) for s in self.sections])
        lines = [
            f"{'section':<{width}}  {'size':>7}  {'checked':>7}  {'kinks':>5}  {'max rel err':>11}  status",
        ]
        for s in self.sections:
            status = "ok" if s.max_rel_error <= self.tolerance else "FAIL"
            lines.append(
                f"{s.name:<{width}}  {s.size:>7}  {s.checked:>7}  {s.excluded:>5}  {s.max_rel_error:>11.3e}  {status}"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"overall: {verdict} (max rel err {self.max_rel_error:.3e}, tolerance {self.tolerance:g}, eps {self.epsilon:g})")
        return "\n".join(lines)


def _evaluate(fn: Callable[[], Tensor], trace: bool) -> tuple[float, list[np.ndarray]]:
    global _kink_trace
    _kink_trace = [] if trace else None
    try:
        out = fn()
    finally:
        seen, _kink_trace = _kink_trace, None
    value = float(np.asarray(out.value).reshape(-1)[0])
    if not math.isfinite(value):
        raise NumericError(f"function value is not finite ({value})")
    return value, seen or []


def _same_trace(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``fn`` takes no arguments and must read the tensors in ``inputs``, which
    are perturbed in place one coordinate at a time. The relative error of a
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    With ``skip_kinks`` a coordinate is excluded when either perturbed
    evaluation changes a ReLU activation pattern or a max-pool winner, since
    central differences are meaningless across such a kink.
    """
    named = dict(inputs) if isinstance(inputs, Mapping) else {f"input{i}": t for i, t in enumerate(inputs)}
    for name, t in named.items():
        if not np.all(np.isfinite(t.value)):
            raise NumericError(f"input {name!r} contains non-finite values")
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        out = fn()
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function value is not finite")
    tape.backward(out)
    _, base_trace = _evaluate(fn, skip_kinks)

    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    for name, t in named.items():
        analytic = np.zeros_like(t.value) if t.grad is None else t.grad.copy()
        flat = t.value.reshape(-1)
        worst, checked, excluded = 0.0, 0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus, tr_plus = _evaluate(fn, skip_kinks)
            flat[i] = orig - epsilon
            f_minus, tr_minus = _evaluate(fn, skip_kinks)
            flat[i] = orig
            if skip_kinks and not (_same_trace(tr_plus, base_trace) and _same_trace(tr_minus, base_trace)):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            if not math.isfinite(a):
                raise NumericError(f"analytic gradient of {name!r}[{i}] is not finite")
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
        report.sections.append(SectionCheck(name, flat.size, checked, excluded, worst))
    return report
