"""Cross-sectional slicing of vehicle point clouds.

A cloud's streamwise extent ``[x_min, x_max]`` is split into ``S`` equal
bins. Each bin's points are projected onto the (y, z) plane, kept in input
order and zero-padded to a common capacity ``M_max``. A boolean mask marks
the real points.

File formats handled here:

* point clouds as text (``x y z`` per line, ``#`` comments) or binary
  (``PCLD0001``, uint64 count, float32 triples, all little-endian);
* slice caches (``SLCT0001``, see :func:`save_slices`).
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CapacityError, FormatError, GeometryError, InputError, ParameterError

log = logging.getLogger(__name__)

CLOUD_MAGIC = b"PCLD0001"
SLICE_MAGIC = b"SLCT0001"


class Normalization(str, enum.Enum):
    NONE = "none"
    PER_CAR_CENTER_SCALE = "per_car_center_scale"


@dataclass(frozen=True)
class PointCloud3D:
    points: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"point cloud must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise GeometryError(f"point cloud {self.source_id!r} has non-finite coordinates")
        if not pts[:, 0].max() > pts[:, 0].min():
            raise GeometryError(f"point cloud {self.source_id!r} has a degenerate streamwise extent")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def x_range(self) -> tuple[float, float]:
        x = self.points[:, 0]
        return float(x.min()), float(x.max())


@dataclass(frozen=True)
class SliceConfig:
    n_slices: int = 80
    m_max: int = 6500
    strict: bool = True
    normalization: Normalization = Normalization.NONE

    def __post_init__(self):
        if self.n_slices < 1 or self.m_max < 1:
            raise ParameterError(f"need n_slices >= 1 and m_max >= 1, got {self.n_slices}, {self.m_max}")
        object.__setattr__(self, "normalization", Normalization(self.normalization))


@dataclass
class SliceTensor:
    data: np.ndarray  # (S, M_max, 2) float32, (y, z) per point
    mask: np.ndarray  # (S, M_max) bool
    counts: np.ndarray  # (S,) int
    source_id: str = ""
    subsampled: bool = field(default=False, compare=False)

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def m_max(self) -> int:
        return self.data.shape[1]

    def padded_to(self, m_max: int) -> "SliceTensor":
        """Same slices with extra padding columns appended."""
        if m_max < self.m_max:
            raise ParameterError(f"cannot shrink padding from {self.m_max} to {m_max}")
        extra = m_max - self.m_max
        data = np.pad(self.data, ((0, 0), (0, extra), (0, 0)))
        mask = np.pad(self.mask, ((0, 0), (0, extra)))
        return SliceTensor(data, mask, self.counts.copy(), self.source_id, self.subsampled)

    def occluded(self, index: int) -> "SliceTensor":
        """Copy with slice ``index`` emptied (mask and data zeroed)."""
        data, mask, counts = self.data.copy(), self.mask.copy(), self.counts.copy()
        data[index] = 0
        mask[index] = False
        counts[index] = 0
        return SliceTensor(data, mask, counts, self.source_id, self.subsampled)


def bin_edges(x_min: float, x_max: float, n_slices: int) -> np.ndarray:
    """``n_slices + 1`` equally spaced edges; the last is exactly ``x_max``."""
    width = (x_max - x_min) / n_slices
    edges = x_min + np.arange(n_slices + 1) * width
    # x_min + S * w can round below x_max, which would leave a sliver uncovered
    edges[-1] = x_max
    return edges


def assign_bins(x: np.ndarray, n_slices: int) -> np.ndarray:
    """Bin index of every x; bins are half-open, ``x_max`` goes to the last bin."""
    x = np.asarray(x, dtype=np.float64)
    x_min, x_max = x.min(), x.max()
    if not x_max > x_min:
        raise GeometryError("degenerate streamwise extent")
    edges = bin_edges(x_min, x_max, n_slices)
    # searchsorted against the explicit edges keeps membership consistent
    # with the half-open intervals [edge_i, edge_{i+1}).
    idx = np.searchsorted(edges, x, side="right") - 1
    return np.clip(idx, 0, n_slices - 1)


def slice_point_cloud(cloud: PointCloud3D, config: SliceConfig) -> SliceTensor:
    """Bin ``cloud`` along x into ``config.n_slices`` padded (y, z) slices.

    Raises:
        CapacityError: a bin holds more than ``m_max`` points and
            ``config.strict`` is set. In lenient mode the bin is thinned by a
            uniform stride instead and a warning is logged.
    """
    cloud = normalize_cloud(cloud, config.normalization)
    S, M = config.n_slices, config.m_max
    bins = assign_bins(cloud.points[:, 0], S)
    order = np.argsort(bins, kind="stable")
    counts = np.bincount(bins, minlength=S)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    data = np.zeros((S, M, 2), dtype=np.float32)
    mask = np.zeros((S, M), dtype=bool)
    yz = cloud.points[:, 1:3].astype(np.float32)
    subsampled = False
    for i in np.flatnonzero(counts):
        members = order[starts[i]: starts[i] + counts[i]]
        n = counts[i]
        if n > M:
            if config.strict:
                raise CapacityError(int(i), int(n), M, cloud.source_id)
            log.warning("slice %d of %r holds %d points; keeping %d by uniform stride", i, cloud.source_id, n, M)
            members = members[(np.arange(M) * n) // M]
            n = M
            subsampled = True
        data[i, :n] = yz[members]
        mask[i, :n] = True
    counts = np.minimum(counts, M).astype(np.int64)
    return SliceTensor(data, mask, counts, cloud.source_id, subsampled)


def bin_populations(cloud: PointCloud3D, n_slices: int) -> np.ndarray:
    return np.bincount(assign_bins(cloud.points[:, 0], n_slices), minlength=n_slices)


def scan_max_points(clouds: Iterable[PointCloud3D], n_slices: int) -> int:
    """Largest bin population over all clouds, i.e. the padding capacity needed."""
    best = None
    for cloud in clouds:
        m = int(bin_populations(cloud, n_slices).max())
        best = m if best is None else max(best, m)
    if best is None:
        raise InputError("scan_max_points needs at least one cloud")
    return best


def normalize_cloud(cloud: PointCloud3D, mode: Normalization | str = Normalization.NONE) -> PointCloud3D:
    mode = Normalization(mode)
    if mode is Normalization.NONE:
        return cloud
    pts = cloud.points
    x_min, x_max = cloud.x_range
    scaled = (pts - pts.mean(axis=0)) / (x_max - x_min)
    return PointCloud3D(scaled, cloud.source_id)


def reconstruct_points(slices: SliceTensor) -> np.ndarray:
    """All real (y, z) points, slice by slice, as an ``(N, 2)`` array."""
    return slices.data[slices.mask]


# ------------------------------------------------------------ cloud files


def read_cloud(path: str | Path, source_id: str | None = None) -> PointCloud3D:
    """Load a point cloud, detecting the binary format by its magic bytes."""
    path = Path(path)
    raw = path.read_bytes()
    sid = source_id if source_id is not None else path.stem
    if raw[:8] == CLOUD_MAGIC:
        return PointCloud3D(_decode_binary_cloud(raw), sid)
    return PointCloud3D(_parse_text_cloud(raw.decode("utf-8", errors="strict"), path), sid)


def _decode_binary_cloud(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError("truncated point-cloud header", len(raw))
    (n,) = struct.unpack_from("<Q", raw, 8)
    expected = 16 + 12 * n
    if len(raw) != expected:
        raise FormatError(f"point-cloud body should hold {n} points ({expected} bytes), file has {len(raw)}", 16)
    return np.frombuffer(raw, dtype="<f4", count=3 * n, offset=16).reshape(n, 3).astype(np.float64)


def _parse_text_cloud(text: str, path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise GeometryError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise GeometryError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
    if not rows:
        raise GeometryError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def write_cloud(cloud: PointCloud3D, path: str | Path, binary: bool = True) -> None:
    path = Path(path)
    if binary:
        body = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
        path.write_bytes(CLOUD_MAGIC + struct.pack("<Q", cloud.n_points) + body)
    else:
        lines = [f"# {cloud.source_id}"] + [f"{x!r} {y!r} {z!r}" for x, y, z in cloud.points.tolist()]
        path.write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ slice cache


def encode_slices(slices: SliceTensor) -> bytes:
    """Serialize to the ``SLCT0001`` layout.

    magic, uint32 S, uint32 M_max, uint32 id length, id bytes (utf-8),
    S uint32 counts, S*M_max*2 float32 data, packed mask bits (little bit
    order, row-major). Everything little-endian.
    """
    sid = slices.source_id.encode("utf-8")
    S, M = slices.n_slices, slices.m_max
    parts = [
        SLICE_MAGIC,
        struct.pack("<III", S, M, len(sid)),
        sid,
        np.asarray(slices.counts, dtype="<u4").tobytes(),
        np.ascontiguousarray(slices.data, dtype="<f4").tobytes(),
        np.packbits(slices.mask.reshape(-1), bitorder="little").tobytes(),
    ]
    return b"".join(parts)


def decode_slices(raw: bytes) -> SliceTensor:
    if raw[:8] != SLICE_MAGIC:
        raise FormatError(f"bad slice-cache magic {raw[:8]!r}", 0)
    if len(raw) < 20:
        raise FormatError("truncated slice-cache header", len(raw))
    S, M, n_id = struct.unpack_from("<III", raw, 8)
    pos = 20
    need = pos + n_id + 4 * S + 8 * S * M + (S * M + 7) // 8
    if len(raw) != need:
        raise FormatError(f"slice cache for shape ({S}, {M}) needs {need} bytes, file has {len(raw)}", min(len(raw), pos))
    sid = raw[pos: pos + n_id].decode("utf-8")
    pos += n_id
    counts = np.frombuffer(raw, dtype="<u4", count=S, offset=pos).astype(np.int64)
    pos += 4 * S
    data = np.frombuffer(raw, dtype="<f4", count=S * M * 2, offset=pos).reshape(S, M, 2).astype(np.float32)
    pos += 8 * S * M
    bits = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    mask = np.unpackbits(bits, count=S * M, bitorder="little").astype(bool).reshape(S, M)
    if not np.array_equal(mask.sum(axis=1), counts):
        raise FormatError("slice-cache mask disagrees with stored counts", pos)
    return SliceTensor(data, mask, counts, sid)


def save_slices(slices: SliceTensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_slices(slices))


def load_slices(path: str | Path) -> SliceTensor:
    return decode_slices(Path(path).read_bytes())
