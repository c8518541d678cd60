"""Slice-sequence drag predictor.

Pipeline per car: every slice's (y, z) points go through a shared per-point
affine+ReLU chain (2 -> 32 -> 64 -> 256 by default) and are max-pooled over
the real points; the resulting slice embeddings feed a two-layer
bidirectional LSTM whose last-layer final states (forward after the rear
slice, backward after the front slice) form a 512-vector; an MLP
(512 -> 256 -> 64 -> 1, dropout after the first ReLU) regresses Cd.

All widths are configuration so small variants can be trained on a laptop.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigMismatchError, DimensionError, FormatError, ParameterError
from .geometry import SliceTensor

PARAMS_MAGIC = b"CDPM0001"
FORMAT_VERSION = 1
VERSION_TAG = "cdslice-model/1"

# Peak number of per-point activations held at once when encoding slices
# outside of a tape (inference). Bounds memory at paper scale.
_INFERENCE_CHUNK_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class ModelConfig:
    n_slices: int = 80
    m_max: int = 6500
    point_channels: tuple[int, ...] = (2, 32, 64, 256)
    hidden: int = 256
    lstm_layers: int = 2
    head_channels: tuple[int, ...] = (256, 64)
    lstm_dropout: float = 0.2
    head_dropout: float = 0.3
    lstm_biases: int = 2
    pool_padding: bool = False
    # Cd = target_mean + target_scale * network output; identity by default
    target_mean: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "point_channels", tuple(int(c) for c in self.point_channels))
        object.__setattr__(self, "head_channels", tuple(int(c) for c in self.head_channels))
        if self.point_channels[0] != 2 or len(self.point_channels) < 2:
            raise ParameterError(f"point_channels must start at 2 and have a layer, got {self.point_channels}")
        if min(self.point_channels + self.head_channels + (self.hidden, self.lstm_layers, self.n_slices, self.m_max)) < 1:
            raise ParameterError("all model dimensions must be positive")
        if self.lstm_biases not in (1, 2):
            raise ParameterError(f"lstm_biases must be 1 or 2, got {self.lstm_biases}")
        for rate in (self.lstm_dropout, self.head_dropout):
            if not 0 <= rate < 1:
                raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        if not (math.isfinite(self.target_mean) and math.isfinite(self.target_scale) and self.target_scale > 0):
            raise ParameterError(
                f"target scaling needs a finite mean and positive scale, got {self.target_mean}, {self.target_scale}"
            )

    @property
    def embed_dim(self) -> int:
        return self.point_channels[-1]

    @classmethod
    def scaled(cls, factor: float, **overrides) -> "ModelConfig":
        """Default architecture with every channel width multiplied by ``factor``."""
        base = cls()

        def s(c):
            return max(1, int(round(c * factor)))

        fields = dict(
            point_channels=(2,) + tuple(s(c) for c in base.point_channels[1:]),
            hidden=s(base.hidden),
            head_channels=tuple(s(c) for c in base.head_channels),
        )
        fields.update(overrides)
        return cls(**fields)

    def describe(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    seed: int = 0
    version: str = VERSION_TAG

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def sections(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.tensors.items():
            if name.startswith(prefix):
                yield name, t

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {
            name: Tensor(t.value.copy(), requires_grad=t.requires_grad, name=name)
            for name, t in self.tensors.items()
        }
        return ModelParams(self.config, tensors, self.seed, self.version)


def _layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every trainable tensor, in canonical order."""
    shapes = []
    pc = config.point_channels
    for k in range(len(pc) - 1):
        shapes.append((f"pointnet.conv{k}.weight", (pc[k + 1], pc[k]), pc[k]))
        shapes.append((f"pointnet.conv{k}.bias", (pc[k + 1],), pc[k]))
    h = config.hidden
    for layer in range(config.lstm_layers):
        in_dim = config.embed_dim if layer == 0 else 2 * h
        for direction in ("fwd", "bwd"):
            p = f"lstm.l{layer}.{direction}"
            shapes.append((f"{p}.w_ih", (4 * h, in_dim), in_dim))
            shapes.append((f"{p}.w_hh", (4 * h, h), h))
            shapes.append((f"{p}.b_ih", (4 * h,), in_dim))
            if config.lstm_biases == 2:
                shapes.append((f"{p}.b_hh", (4 * h,), h))
    dims = (2 * h,) + config.head_channels + (1,)
    for k in range(len(dims) - 1):
        shapes.append((f"regressor.fc{k}.weight", (dims[k + 1], dims[k]), dims[k]))
        shapes.append((f"regressor.fc{k}.bias", (dims[k + 1],), dims[k]))
    return shapes


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _layer_shapes(config):
        bound = 1.0 / math.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
    return ModelParams(config, tensors, seed)


def count_parameters(params: ModelParams | ModelConfig, prefix: str = "") -> int:
    if isinstance(params, ModelConfig):
        return sum(int(np.prod(shape)) for name, shape, _ in _layer_shapes(params) if name.startswith(prefix))
    return sum(t.value.size for _, t in params.sections(prefix))


# ------------------------------------------------------------ slice encoder


def _pointnet_chain(params: ModelParams, points: Tensor) -> Tensor:
    h = points
    for k in range(len(params.config.point_channels) - 1):
        h = ad.relu(ad.affine(h, params[f"pointnet.conv{k}.weight"], params[f"pointnet.conv{k}.bias"]))
    return h


def encode_slice(slice_points, mask, params: ModelParams) -> Tensor:
    """Embed one slice: ``(M, 2)`` points and ``(M,)`` mask to a ``(d_e,)`` vector."""
    pts = ad.as_tensor(slice_points)
    if pts.value.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"slice points must have shape (M, 2), got {pts.shape}")
    return ad.masked_max_pool(_pointnet_chain(params, pts), mask, params.config.pool_padding)


def encode_slices(params: ModelParams, data, mask) -> Tensor:
    """Embed every slice of a batch: ``(B, S, M, 2)`` -> ``(B, S, d_e)``."""
    data = ad.as_tensor(data)
    mask = np.asarray(mask, dtype=bool)
    if data.value.ndim != 4 or data.shape[-1] != 2 or mask.shape != data.shape[:-1]:
        raise DimensionError(f"expected data (B, S, M, 2) with mask (B, S, M), got {data.shape} and {mask.shape}")
    B, S, M, _ = data.shape
    pool_padding = params.config.pool_padding
    widest = max(params.config.point_channels)
    if ad._active_tapes or B * S * M * widest <= _INFERENCE_CHUNK_ELEMENTS:
        return ad.masked_max_pool(_pointnet_chain(params, data), mask, pool_padding)
    # Inference on large inputs: encode a few slices at a time.
    flat = data.value.reshape(B * S, M, 2)
    flat_mask = mask.reshape(B * S, M)
    step = max(1, _INFERENCE_CHUNK_ELEMENTS // (M * widest))
    out = np.empty((B * S, params.config.embed_dim), dtype=ad.get_dtype())
    for lo in range(0, B * S, step):
        chunk = Tensor(flat[lo: lo + step])
        out[lo: lo + step] = ad.masked_max_pool(_pointnet_chain(params, chunk), flat_mask[lo: lo + step], pool_padding).value
    return Tensor(out.reshape(B, S, -1))


# ------------------------------------------------------------ sequence model


def _cell_from_gates(gates: Tensor, c_prev: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
    i = ad.sigmoid(ad.narrow(gates, 0, hidden))
    f = ad.sigmoid(ad.narrow(gates, hidden, 2 * hidden))
    g = ad.tanh_act(ad.narrow(gates, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.narrow(gates, 3 * hidden, 4 * hidden))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh_act(c))
    return h, c


def lstm_cell(x, h_prev, c_prev, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor | None = None):
    """One LSTM step with gate blocks ordered (input, forget, cell, output).

    Returns ``(h, c)``.
    """
    x, h_prev, c_prev = ad.as_tensor(x), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    hidden = w_hh.shape[1]
    gates = ad.add(ad.affine(x, w_ih, b_ih), ad.affine(h_prev, w_hh, b_hh))
    return _cell_from_gates(gates, c_prev, hidden)


def _run_direction(params: ModelParams, prefix: str, inputs: Tensor, reverse: bool) -> list[Tensor]:
    B, S, _ = inputs.shape
    hdim = params.config.hidden
    w_hh = params[f"{prefix}.w_hh"]
    b_hh = params.tensors.get(f"{prefix}.b_hh")
    # Input projections for all steps at once; rows are computed
    # independently, so this equals the per-step projection exactly.
    xw = ad.affine(inputs, params[f"{prefix}.w_ih"], params[f"{prefix}.b_ih"])
    h = Tensor(np.zeros((B, hdim)))
    c = Tensor(np.zeros((B, hdim)))
    outputs: list[Tensor] = [None] * S
    for t in (reversed(range(S)) if reverse else range(S)):
        gates = ad.add(ad.select(xw, t, axis=1), ad.affine(h, w_hh, b_hh))
        h, c = _cell_from_gates(gates, c, hdim)
        outputs[t] = h
    return outputs


def encode_sequence(params: ModelParams, embeddings, training: bool = False, rng=None) -> Tensor:
    """Bidirectional stacked LSTM over ``(B, S, d_e)`` slice embeddings -> ``(B, 2h)``."""
    x = ad.as_tensor(embeddings)
    if x.value.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"expected embeddings (B, S, d) with S >= 1, got {x.shape}")
    cfg = params.config
    for layer in range(cfg.lstm_layers):
        fwd = _run_direction(params, f"lstm.l{layer}.fwd", x, reverse=False)
        bwd = _run_direction(params, f"lstm.l{layer}.bwd", x, reverse=True)
        if layer == cfg.lstm_layers - 1:
            return ad.concat([fwd[-1], bwd[0]], axis=-1)
        x = ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=-1)
        x = ad.dropout(x, cfg.lstm_dropout, training, rng)
    raise AssertionError("unreachable")


def _unstandardize(params: ModelParams, raw: Tensor) -> Tensor:
    mean, scale = params.config.target_mean, params.config.target_scale
    if mean == 0.0 and scale == 1.0:
        return raw
    return ad.record_op("unstandardize", (raw,), mean + scale * raw.value, lambda g: (g * scale,))


def regress(
    params: ModelParams, car_embedding, training: bool = False, rng=None, standardized: bool = False
) -> Tensor:
    """MLP head: ``(B, 2h)`` -> ``(B,)`` Cd values.

    With ``standardized`` the head's raw output is returned, i.e. Cd before
    the configured ``target_mean``/``target_scale`` mapping.
    """
    h = ad.as_tensor(car_embedding)
    n = len(params.config.head_channels) + 1
    for k in range(n):
        h = ad.affine(h, params[f"regressor.fc{k}.weight"], params[f"regressor.fc{k}.bias"])
        if k < n - 1:
            h = ad.relu(h)
            if k == 0:
                h = ad.dropout(h, params.config.head_dropout, training, rng)
    raw = ad.select(h, 0, axis=-1)
    return raw if standardized else _unstandardize(params, raw)


def forward(params: ModelParams, data, mask, training: bool = False, rng=None, standardized: bool = False) -> Tensor:
    """Predicted Cd for a batch of slice stacks ``(B, S, M, 2)`` -> ``(B,)``."""
    data = ad.as_tensor(data)
    if data.value.ndim != 4 or data.shape[1] != params.config.n_slices:
        raise DimensionError(
            f"input {data.shape} does not match the model's {params.config.n_slices} slices"
        )
    emb = encode_slices(params, data, mask)
    return regress(params, encode_sequence(params, emb, training, rng), training, rng, standardized)


def predict(slices: SliceTensor, params: ModelParams, training: bool = False, rng=None) -> float:
    out = forward(params, slices.data[None], slices.mask[None], training, rng)
    return float(out.value[0])


def predict_many(params: ModelParams, data: np.ndarray, mask: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference over stacked samples; results do not depend on ``batch_size``."""
    out = []
    for lo in range(0, len(data), batch_size):
        out.append(forward(params, data[lo: lo + batch_size], mask[lo: lo + batch_size]).value)
    return np.concatenate(out) if out else np.zeros(0, dtype=ad.get_dtype())


def slice_sensitivity(slices: SliceTensor, params: ModelParams) -> np.ndarray:
    """Change in predicted Cd when each slice in turn is emptied.

    ``delta[i] = predict(slices with slice i removed) - predict(slices)``,
    front to rear. Removing a slice turns its embedding into zeros, so the
    slice encoder runs once and only the sequence model is re-evaluated.
    """
    emb = encode_slices(params, slices.data[None], slices.mask[None]).value

    def head(e):
        return float(regress(params, encode_sequence(params, e)).value[0])

    base = head(emb)
    deltas = np.empty(slices.n_slices, dtype=np.float64)
    for i in range(slices.n_slices):
        occluded = emb.copy()
        occluded[0, i] = 0
        deltas[i] = head(occluded) - base
    return deltas


# ------------------------------------------------------------ checkpoints


def _encode_config(config: ModelConfig, seed: int, version: str) -> bytes:
    pc, hc = config.point_channels, config.head_channels
    tag = version.encode("utf-8")
    return b"".join([
        struct.pack("<II", config.n_slices, config.m_max),
        struct.pack(f"<I{len(pc)}I", len(pc), *pc),
        struct.pack("<II", config.hidden, config.lstm_layers),
        struct.pack(f"<I{len(hc)}I", len(hc), *hc),
        struct.pack("<IB", config.lstm_biases, int(config.pool_padding)),
        struct.pack("<ddQ", config.lstm_dropout, config.head_dropout, seed),
        struct.pack("<dd", config.target_mean, config.target_scale),
        struct.pack("<I", len(tag)),
        tag,
    ])


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        values = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return values

    def take_bytes(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out


def encode_params(params: ModelParams) -> bytes:
    """Serialize to the ``CDPM0001`` layout (little-endian).

    magic, uint32 format version, uint32 config length, config block,
    uint32 section count, then per section: uint32 name length, name,
    uint64 element count, float32 values.
    """
    cfg = _encode_config(params.config, params.seed, params.version)
    parts = [PARAMS_MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", t.value.size))
        parts.append(np.ascontiguousarray(t.value, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_params(raw: bytes) -> ModelParams:
    r = _Reader(raw)
    magic = r.take_bytes(8, "magic")
    if magic != PARAMS_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    version, cfg_len = r.take("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}", 8)
    cfg_start = r.pos
    n_slices, m_max = r.take("<II", "config")
    (n_pc,) = r.take("<I", "config")
    pc = r.take(f"<{n_pc}I", "config")
    hidden, lstm_layers = r.take("<II", "config")
    (n_hc,) = r.take("<I", "config")
    hc = r.take(f"<{n_hc}I", "config")
    lstm_biases, pool_padding = r.take("<IB", "config")
    lstm_dropout, head_dropout, seed = r.take("<ddQ", "config")
    target_mean, target_scale = r.take("<dd", "config")
    (n_tag,) = r.take("<I", "config")
    tag = r.take_bytes(n_tag, "version tag").decode("utf-8")
    if r.pos - cfg_start != cfg_len:
        raise FormatError(f"config block length {cfg_len} disagrees with its contents", cfg_start)
    try:
        config = ModelConfig(
            n_slices, m_max, pc, hidden, lstm_layers, hc, lstm_dropout, head_dropout, lstm_biases,
            bool(pool_padding), target_mean, target_scale,
        )
    except ParameterError as exc:
        raise FormatError(f"invalid config block: {exc}", cfg_start) from None
    expected = {name: shape for name, shape, _ in _layer_shapes(config)}
    (n_sections,) = r.take("<I", "section count")
    if n_sections != len(expected):
        raise FormatError(f"checkpoint has {n_sections} sections, config implies {len(expected)}", r.pos - 4)
    tensors = {}
    for _ in range(n_sections):
        at = r.pos
        (n_name,) = r.take("<I", "section name length")
        name = r.take_bytes(n_name, "section name").decode("utf-8", errors="replace")
        (count,) = r.take("<Q", f"section {name!r} size")
        if name not in expected:
            raise FormatError(f"unexpected section {name!r}", at)
        shape = expected[name]
        if count != int(np.prod(shape)):
            raise FormatError(f"section {name!r} holds {count} values, expected {int(np.prod(shape))}", at)
        body = r.take_bytes(4 * count, f"section {name!r} data")
        values = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last section", r.pos)
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(config, ordered, seed, tag)


def save_params(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path: str | Path, expect: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint, optionally insisting on a particular configuration."""
    params = decode_params(Path(path).read_bytes())
    if expect is not None and params.config != expect:
        diffs = {
            k: (v, getattr(expect, k)) for k, v in asdict(params.config).items() if getattr(expect, k) != v
        }
        detail = ", ".join(f"{k}: checkpoint {a} vs expected {b}" for k, (a, b) in diffs.items())
        raise ConfigMismatchError(f"checkpoint {path} was built for a different model ({detail})")
    return params
