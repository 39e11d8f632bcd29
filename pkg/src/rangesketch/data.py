"""Datasets: CSV ingestion, normalization, synthetic generators, binary cache.

A dataset is an n x dims float64 table whose values all live in [0, 1],
plus the index of the measure attribute (the column that aggregates) and
the per-column (min, max) pairs used to map raw values into the unit
interval.  Generators are pure functions of their parameters and seed.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GenerationError, IngestError

DATASET_MAGIC = b"NSDT"
DATASET_VERSION = 1

# Rejection sampling gives up below this acceptance rate.
_MIN_ACCEPT_RATE = 1e-3
_MIN_PROPOSALS = 10_000


@dataclass(frozen=True)
class Dataset:
    """Immutable table of normalized attributes with one measure column."""

    rows: np.ndarray  # shape (n, dims), float64, values in [0, 1]
    measure_index: int
    norm_params: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        rows = np.ascontiguousarray(np.asarray(self.rows, dtype=np.float64))
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("dataset needs at least one row of attributes")
        if not (0 <= self.measure_index < rows.shape[1]):
            raise ValueError(
                f"measure_index {self.measure_index} out of range for "
                f"{rows.shape[1]} attributes"
            )
        if not self.norm_params:
            object.__setattr__(
                self, "norm_params", tuple((0.0, 1.0) for _ in range(rows.shape[1]))
            )
        if len(self.norm_params) != rows.shape[1]:
            raise ValueError("norm_params length must match attribute count")
        if rows.min() < 0.0 or rows.max() > 1.0:
            raise ValueError("dataset values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dims(self) -> int:
        return self.rows.shape[1]

    @property
    def measure(self) -> np.ndarray:
        return self.rows[:, self.measure_index]

    def denormalize(self, normalized: np.ndarray) -> np.ndarray:
        """Map normalized rows back to raw units via the stored extrema."""
        normalized = np.asarray(normalized, dtype=np.float64)
        lo = np.array([p[0] for p in self.norm_params])
        hi = np.array([p[1] for p in self.norm_params])
        return lo + normalized * (hi - lo)


def normalize_columns(raw: np.ndarray) -> tuple[np.ndarray, tuple[tuple[float, float], ...]]:
    """Affinely map each column onto [0, 1]; constant columns map to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    normalized = (raw - lo) / safe
    normalized[:, span == 0] = 0.0
    return normalized, tuple((float(a), float(b)) for a, b in zip(lo, hi))


def load_csv(path: str, measure_index: int) -> Dataset:
    """Read a comma-separated file (header row, finite reals) and normalize it.

    Raises IngestError naming the offending row and column when a cell does
    not parse as a finite real.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file, expected a header row")
        width = len(header)
        if width == 0:
            raise IngestError(f"{path}: header row has no columns")
        if not (0 <= measure_index < width):
            raise ValueError(
                f"measure_index {measure_index} out of range for {width} columns"
            )
        values = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise IngestError(
                    f"{path}:{line_no}: expected {width} cells, got {len(row)}"
                )
            parsed = []
            for col, cell in enumerate(row):
                try:
                    x = float(cell)
                except ValueError:
                    x = math.nan
                if not math.isfinite(x):
                    raise IngestError(
                        f"{path}:{line_no}: column {header[col]!r} has "
                        f"unparsable cell {cell!r}"
                    )
                parsed.append(x)
            values.append(parsed)
    if not values:
        raise IngestError(f"{path}: no data rows after header")
    normalized, params = normalize_columns(np.array(values))
    return Dataset(rows=normalized, measure_index=measure_index, norm_params=params)


def gen_uniform(n: int, dims: int, seed: int, measure_index: int = 0) -> Dataset:
    """n i.i.d. points uniform on the unit cube."""
    if n < 1 or dims < 1:
        raise ValueError("n and dims must be at least 1")
    rng = np.random.default_rng(seed)
    return Dataset(rows=rng.random((n, dims)), measure_index=measure_index)


def _rejection_fill(n: int, dims: int, draw, context: str) -> np.ndarray:
    """Draw batches from `draw` and keep points inside the unit cube."""
    kept: list[np.ndarray] = []
    have = 0
    proposed = 0
    accepted = 0
    while have < n:
        batch = max(n - have, 1024)
        pts = draw(batch)
        inside = pts[np.all((pts >= 0.0) & (pts <= 1.0), axis=1)]
        proposed += batch
        accepted += len(inside)
        if proposed >= _MIN_PROPOSALS and accepted < _MIN_ACCEPT_RATE * proposed:
            raise GenerationError(
                f"{context}: acceptance rate {accepted / proposed:.2e} below "
                f"{_MIN_ACCEPT_RATE:.0e}; distribution mass lies outside [0,1]^d"
            )
        kept.append(inside)
        have += len(inside)
    return np.concatenate(kept)[:n]


def gen_gaussian(
    n: int,
    dims: int,
    mu,
    sigma: float,
    seed: int,
    measure_index: int = 0,
) -> Dataset:
    """Isotropic Gaussian truncated to the unit cube by rejection.

    Rejection (rather than clipping) keeps the density smooth: clipping
    would pile probability atoms onto the cube faces.
    """
    if n < 1 or dims < 1:
        raise ValueError("n and dims must be at least 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (dims,))
    rng = np.random.default_rng(seed)
    rows = _rejection_fill(
        n, dims, lambda m: mu + sigma * rng.standard_normal((m, dims)), "gen_gaussian"
    )
    return Dataset(rows=rows, measure_index=measure_index)


def gen_gmm(
    n: int,
    dims: int,
    components: int,
    seed: int,
    measure_index: int = 0,
    means: np.ndarray | None = None,
    scales: np.ndarray | None = None,
) -> Dataset:
    """Gaussian mixture truncated to the unit cube.

    By default component means are uniform in the cube and the per-axis
    standard deviations are drawn log-uniformly from [0.005, 0.05]; both
    can be pinned explicitly (shape (components, dims)) for controlled
    experiments.  Components have equal weight.
    """
    if n < 1 or dims < 1:
        raise ValueError("n and dims must be at least 1")
    if components < 1:
        raise ValueError("components must be at least 1")
    rng = np.random.default_rng(seed)
    if means is None:
        means = rng.random((components, dims))
    else:
        means = np.broadcast_to(np.asarray(means, dtype=np.float64), (components, dims))
    if scales is None:
        scales = np.exp(rng.uniform(math.log(0.005), math.log(0.05), (components, dims)))
    else:
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (components, dims))

    def draw(m: int) -> np.ndarray:
        which = rng.integers(0, components, m)
        return means[which] + scales[which] * rng.standard_normal((m, dims))

    rows = _rejection_fill(n, dims, draw, "gen_gmm")
    return Dataset(rows=rows, measure_index=measure_index)


def save_dataset(ds: Dataset, path: str) -> None:
    """Write the binary cache: NSDT, version, n, dims, measure, row-major f64 LE.

    Only the normalized values are cached; reloading yields identity
    norm_params.
    """
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HQHH", DATASET_VERSION, ds.n, ds.dims, ds.measure_index))
        fh.write(ds.rows.astype("<f8").tobytes())


def load_dataset(path: str) -> Dataset:
    """Read a binary cache written by save_dataset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sHQHH")
    if len(blob) < head:
        raise FormatError(f"{path}: truncated dataset header")
    magic, version, n, dims, measure_index = struct.unpack("<4sHQHH", blob[:head])
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    body = blob[head:]
    expected = n * dims * 8
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} value bytes, got {len(body)}")
    rows = np.frombuffer(body, dtype="<f8").reshape(n, dims)
    return Dataset(rows=rows.copy(), measure_index=measure_index)
