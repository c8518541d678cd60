"""Dataset manifests and a synthetic parametric-body generator.

A manifest is a CSV with header ``id,path,cd,split``; paths are resolved
relative to the manifest's directory.

Synthetic bodies stretch along x from 0 to ``L``. At station ``u = x / L``
the cross-section is the superellipse ``|y/a|^m + |z/b|^m = 1`` with
``a = a0 r(u)``, ``b = b0 r(u)``. The profile ``r`` rises over the nose as
``sqrt(1 - (1 - s)^2)``, stays at 1 through the midbody and falls over the
tail as ``(1 - s)^p`` (``s`` is the local coordinate within nose or tail).

The label is a pseudo drag coefficient::

    cd = 0.20 + 0.50 * a0 b0 / L^2 + 0.15 * mean_tail((dA/du)^2)

where ``A(u)`` is the section area in units of ``L^2``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate

from .errors import ConfigMismatchError, InputError, ManifestError, ParameterError
from .geometry import (
    SLICE_MAGIC,
    PointCloud3D,
    SliceConfig,
    SliceTensor,
    load_slices,
    read_cloud,
    scan_max_points,
    slice_point_cloud,
    write_cloud,
)
from .training import SliceDataset

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CD_BASE = 0.20
CD_FRONTAL = 0.50
CD_TAIL = 0.15


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    cloud_path: Path
    cd: float
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def __len__(self) -> int:
        return len(self.rows)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "path", "cd", "split"])
            for r in self.rows:
                try:
                    rel = r.cloud_path.relative_to(path.parent.resolve())
                except ValueError:
                    rel = r.cloud_path
                w.writerow([r.sample_id, rel.as_posix(), repr(r.cd), r.split])


def load_manifest(path: str | Path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    root = path.parent.resolve()
    rows: list[ManifestRow] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "path", "cd", "split"]:
            raise ManifestError(f"expected header id,path,cd,split, got {header}", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 4:
                raise ManifestError(f"expected 4 fields, got {len(rec)}", lineno)
            sid, rel, cd_text, split = (f.strip() for f in rec)
            if sid in seen:
                raise ManifestError(f"duplicate sample id {sid!r} (first on line {seen[sid]})", lineno)
            try:
                cd = float(cd_text)
            except ValueError:
                raise ManifestError(f"cd value {cd_text!r} is not a number", lineno) from None
            if not math.isfinite(cd):
                raise ManifestError(f"cd value {cd_text!r} is not finite", lineno)
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}; expected one of {SPLITS}", lineno)
            cloud_path = (root / rel).resolve()
            if check_paths and not cloud_path.is_file():
                raise ManifestError(f"cloud file {rel!r} not found", lineno)
            seen[sid] = lineno
            rows.append(ManifestRow(sid, cloud_path, cd, split))
    return Manifest(rows, root)


# ------------------------------------------------------------ synthetic bodies


@dataclass(frozen=True)
class SyntheticBodySpec:
    length: float = 4.5
    nose_fraction: float = 0.2
    tail_fraction: float = 0.25
    half_width: float = 0.9
    half_height: float = 0.7
    tail_exponent: float = 2.0
    section_exponent: float = 2.0
    n_points: int = 1024
    seed: int = 0

    def validate(self) -> None:
        if not (0 < self.nose_fraction < 1 and 0 < self.tail_fraction < 1):
            raise ParameterError("nose and tail fractions must lie in (0, 1)")
        if self.nose_fraction + self.tail_fraction >= 1:
            raise ParameterError("nose and tail fractions must leave room for a midbody")
        if min(self.length, self.half_width, self.half_height, self.section_exponent) <= 0:
            raise ParameterError("body dimensions and section exponent must be positive")
        if self.tail_exponent <= 0.25:
            # the tail slope term diverges for exponents at or below 1/4
            raise ParameterError(f"tail exponent must exceed 0.25, got {self.tail_exponent}")
        if self.n_points < 2:
            raise ParameterError("a body needs at least two points")


@lru_cache(maxsize=None)
def _unit_superellipse_quadrant(m: float) -> float:
    """Integral of (1 - t^m)^(1/m) over [0, 1]; the full area is 4ab times this."""
    value, _ = integrate.quad(lambda t: (1.0 - t ** m) ** (1.0 / m), 0.0, 1.0, epsabs=1e-13, epsrel=1e-13, limit=200)
    return value


def superellipse_area(a, b, m: float):
    return 4.0 * np.asarray(a) * np.asarray(b) * _unit_superellipse_quadrant(float(m))


def profile_scale(u, spec: SyntheticBodySpec) -> np.ndarray:
    """Cross-section scale r(u) in [0, 1] along the body."""
    u = np.asarray(u, dtype=np.float64)
    fn, ft = spec.nose_fraction, spec.tail_fraction
    r = np.ones_like(u)
    nose = u < fn
    s = u[nose] / fn
    r[nose] = np.sqrt(np.clip(1.0 - (1.0 - s) ** 2, 0.0, 1.0))
    tail = u > 1.0 - ft
    s = (u[tail] - (1.0 - ft)) / ft
    r[tail] = np.clip(1.0 - s, 0.0, 1.0) ** spec.tail_exponent
    return r


def section_area(u, spec: SyntheticBodySpec) -> np.ndarray:
    """Cross-section area A(u) in units of L^2."""
    r = profile_scale(u, spec)
    L = spec.length
    return superellipse_area(spec.half_width * r / L, spec.half_height * r / L, spec.section_exponent)


def tail_slope_term(spec: SyntheticBodySpec) -> float:
    """Mean of (dA/du)^2 over the tail, in closed form.

    With A = A0 (1 - s)^(2p) and u = 1 - ft + ft s the mean over s in [0, 1]
    is (2 p A0 / ft)^2 / (4p - 1).
    """
    p, ft = spec.tail_exponent, spec.tail_fraction
    a0 = float(superellipse_area(spec.half_width / spec.length, spec.half_height / spec.length, spec.section_exponent))
    return (2.0 * p * a0 / ft) ** 2 / (4.0 * p - 1.0)


def cd_proxy(spec: SyntheticBodySpec) -> float:
    spec.validate()
    frontal = spec.half_width * spec.half_height / spec.length ** 2
    return CD_BASE + CD_FRONTAL * frontal + CD_TAIL * tail_slope_term(spec)


def generate_synthetic_body(spec: SyntheticBodySpec, source_id: str = "") -> tuple[PointCloud3D, float]:
    """Sample surface points of the body described by ``spec`` and its label.

    Stations are stratified: point ``j`` sits at ``u = (j + U_j) / N`` with
    ``U_j`` uniform in [0, 1); its angle around the section is uniform.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    N = spec.n_points
    u = (np.arange(N) + rng.random(N)) / N
    theta = rng.uniform(0.0, 2.0 * np.pi, N)
    r = profile_scale(u, spec)
    e = 2.0 / spec.section_exponent
    c, s = np.cos(theta), np.sin(theta)
    y = spec.half_width * r * np.sign(c) * np.abs(c) ** e
    z = spec.half_height * r * np.sign(s) * np.abs(s) ** e
    pts = np.column_stack([u * spec.length, y, z])
    return PointCloud3D(pts, source_id), cd_proxy(spec)


@dataclass(frozen=True)
class SpecRanges:
    """Closed intervals from which synthetic body parameters are drawn uniformly.

    Length is held fixed by default: slicing rescales every body to the same
    number of bins, so the model cannot observe absolute length.
    """

    length: tuple[float, float] = (4.5, 4.5)
    nose_fraction: tuple[float, float] = (0.15, 0.3)
    tail_fraction: tuple[float, float] = (0.2, 0.35)
    half_width: tuple[float, float] = (0.8, 1.0)
    half_height: tuple[float, float] = (0.6, 0.8)
    tail_exponent: tuple[float, float] = (1.0, 3.0)
    section_exponent: tuple[float, float] = (2.0, 4.0)
    n_points: int = 1024

    def sample(self, rng: np.random.Generator, seed: int) -> SyntheticBodySpec:
        values = {}
        for f in fields(SyntheticBodySpec):
            if f.name in ("n_points", "seed"):
                continue
            lo, hi = getattr(self, f.name)
            if hi < lo:
                raise ParameterError(f"range for {f.name} is empty: {lo} > {hi}")
            values[f.name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        return SyntheticBodySpec(n_points=self.n_points, seed=seed, **values)


def split_sizes(n: int) -> dict[str, int]:
    """70/15/15 with validation and test sizes rounded down."""
    n_val = n_test = int(math.floor(0.15 * n))
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def build_synthetic_dataset(
    n_bodies: int,
    out_dir: str | Path,
    seed: int = 0,
    ranges: SpecRanges = SpecRanges(),
    threads: int = 1,
) -> Manifest:
    """Write ``n_bodies`` synthetic clouds, spec sidecars and ``manifest.csv``."""
    if n_bodies < 3:
        raise InputError(f"need at least 3 bodies for a train/val/test split, got {n_bodies}")
    out = Path(out_dir)
    try:
        (out / "clouds").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    rng = np.random.default_rng(seed)
    body_seeds = rng.integers(0, 2**63 - 1, size=n_bodies)
    specs = [ranges.sample(rng, int(s)) for s in body_seeds]
    sizes = split_sizes(n_bodies)
    labels = np.array(["train"] * sizes["train"] + ["val"] * sizes["val"] + ["test"] * sizes["test"])
    labels = labels[rng.permutation(n_bodies)]
    width = max(4, len(str(n_bodies - 1)))

    def make(i: int) -> ManifestRow:
        sid = f"body_{i:0{width}d}"
        cloud, cd = generate_synthetic_body(specs[i], sid)
        path = out / "clouds" / f"{sid}.pcld"
        write_cloud(cloud, path)
        meta = {"id": sid, "cd": cd, "spec": asdict(specs[i])}
        (out / "clouds" / f"{sid}.json").write_text(json.dumps(meta, indent=2) + "\n")
        return ManifestRow(sid, path.resolve(), cd, str(labels[i]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(make, range(n_bodies)))
    else:
        rows = [make(i) for i in range(n_bodies)]
    manifest = Manifest(rows, out.resolve())
    manifest.write(out / "manifest.csv")
    return manifest


def load_clouds(rows: list[ManifestRow]) -> list[PointCloud3D]:
    return [read_cloud(r.cloud_path, r.sample_id) for r in rows]


def dataset_stats(manifest: Manifest, n_slices: int) -> dict:
    """Per-split sample counts and Cd range, plus the padding capacity needed."""
    out: dict = {"n_slices": n_slices, "splits": {}}
    for name in SPLITS:
        rows = manifest.split(name)
        cds = np.array([r.cd for r in rows], dtype=np.float64)
        entry = {"count": len(rows)}
        if rows:
            entry.update(cd_min=float(cds.min()), cd_mean=float(cds.mean()), cd_max=float(cds.max()))
        out["splits"][name] = entry
    out["m_max"] = scan_max_points(load_clouds(manifest.rows), n_slices) if manifest.rows else 0
    return out


def load_sample_slices(row: ManifestRow, config: SliceConfig) -> SliceTensor:
    """Slices for one manifest row; rows may point at clouds or slice caches."""
    with open(row.cloud_path, "rb") as fh:
        head = fh.read(8)
    if head == SLICE_MAGIC:
        slices = load_slices(row.cloud_path)
        if slices.n_slices != config.n_slices:
            raise ConfigMismatchError(
                f"cache {row.cloud_path} has {slices.n_slices} slices, configuration asks for {config.n_slices}"
            )
        if slices.m_max > config.m_max:
            raise ConfigMismatchError(
                f"cache {row.cloud_path} is padded to {slices.m_max}, configuration allows {config.m_max}"
            )
        return slices.padded_to(config.m_max)
    return slice_point_cloud(read_cloud(row.cloud_path, row.sample_id), config)


def load_slice_dataset(rows: list[ManifestRow], config: SliceConfig) -> SliceDataset:
    slices = [load_sample_slices(r, config) for r in rows]
    return SliceDataset.from_slices(slices, [r.cd for r in rows], [r.sample_id for r in rows])


def rows_are_cached(rows: list[ManifestRow]) -> bool:
    for r in rows:
        with open(r.cloud_path, "rb") as fh:
            if fh.read(8) != SLICE_MAGIC:
                return False
    return bool(rows)


def resolve_m_max(manifest: Manifest, n_slices: int) -> int:
    """Padding capacity implied by a manifest: cache width, or a scan of its clouds."""
    if rows_are_cached(manifest.rows):
        return max(load_slices(r.cloud_path).m_max for r in manifest.rows)
    return scan_max_points(load_clouds(manifest.rows), n_slices)
