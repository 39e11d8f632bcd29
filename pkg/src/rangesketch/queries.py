"""Query representation, predicate evaluation, exact oracle, query sampling.

A query against a dims-attribute table is either an axis-aligned range —
per-attribute lower bounds c and widths r, flattened to the 2*dims vector
(c_1..c_dims, r_1..r_dims) — or a rotated rectangle over the first two
attributes, flattened to (px, py, px2, py2, phi).

Range semantics are half-open: a row matches attribute i when
c_i <= x_i < c_i + r_i.  The one exception is a range whose upper bound
reaches the domain ceiling (c_i + r_i >= 1), which also matches x_i == 1
so that the full range (c=0, r=1) matches every row.

The oracle answers queries by exact scan.  COUNT and SUM of zero matches
are 0; AVG, STD and MEDIAN of zero matches are EMPTY, a distinguished
value represented as None (NaN inside batched arrays).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Dataset
from .errors import FormatError, TrainingSetError

TRAINING_MAGIC = b"NSTQ"

_Q_EPS = 1e-9  # slack for float round-off in membership checks


class Aggregation(str, Enum):
    COUNT = "count"
    SUM = "sum"
    AVG = "avg"
    STD = "std"
    MEDIAN = "median"


class PredicateKind(str, Enum):
    AXIS_RANGE = "axis_range"
    ROTATED_RECT = "rotated_rect"


# Aggregations whose empty-match answer is EMPTY rather than 0.
EMPTY_UNDEFINED = {Aggregation.AVG, Aggregation.STD, Aggregation.MEDIAN}


@dataclass(frozen=True)
class QuerySpec:
    """What kind of query a model or oracle is answering."""

    agg: Aggregation
    measure_index: int
    predicate: PredicateKind = PredicateKind.AXIS_RANGE
    active_count: int = 1

    def __post_init__(self):
        if self.active_count < 1:
            raise ValueError("active_count must be at least 1")

    def vector_dims(self, data_dims: int) -> int:
        if self.predicate is PredicateKind.ROTATED_RECT:
            return 5
        return 2 * data_dims


@dataclass(frozen=True)
class QueryInstance:
    """Axis-aligned range query: lower bounds c and widths r."""

    c: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "r", r)
        if c.shape != r.shape or c.ndim != 1:
            raise ValueError("c and r must be 1-d vectors of equal length")
        if (c < -_Q_EPS).any() or (r < -_Q_EPS).any() or (c + r > 1 + _Q_EPS).any():
            raise ValueError("query outside domain: need 0 <= c, 0 <= r, c + r <= 1")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.r])

    @staticmethod
    def from_vector(v: np.ndarray) -> "QueryInstance":
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size % 2 != 0:
            raise ValueError("axis-range query vector must have even length")
        half = v.size // 2
        return QueryInstance(c=v[:half], r=v[half:])


@dataclass(frozen=True)
class RotatedRectQuery:
    """Rectangle given by two opposite corners, rotated by phi about its center."""

    p: np.ndarray
    p2: np.ndarray
    phi: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        p2 = np.asarray(self.p2, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "p2", p2)
        if p.shape != (2,) or p2.shape != (2,):
            raise ValueError("corners must be 2-vectors")
        if (p < -_Q_EPS).any() or (p > 1 + _Q_EPS).any() or (p2 < -_Q_EPS).any() or (p2 > 1 + _Q_EPS).any():
            raise ValueError("corners must lie in [0, 1]^2")
        if not (0 <= self.phi < np.pi / 2):
            raise ValueError("phi must lie in [0, pi/2)")

    def vector(self) -> np.ndarray:
        return np.array([self.p[0], self.p[1], self.p2[0], self.p2[1], self.phi])

    @staticmethod
    def from_vector(v: np.ndarray) -> "RotatedRectQuery":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (5,):
            raise ValueError("rotated-rect query vector must have length 5")
        return RotatedRectQuery(p=v[:2], p2=v[2:4], phi=float(v[4]))


def validate_query_vectors(q: np.ndarray, predicate: PredicateKind) -> np.ndarray:
    """Check domain membership for a (m, d) batch; returns the float64 array."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if predicate is PredicateKind.AXIS_RANGE:
        if q.shape[1] % 2 != 0:
            raise ValueError("axis-range query vectors must have even length")
        half = q.shape[1] // 2
        c, r = q[:, :half], q[:, half:]
        if (c < -_Q_EPS).any() or (r < -_Q_EPS).any() or (c + r > 1 + _Q_EPS).any():
            raise ValueError("query outside domain: need 0 <= c, 0 <= r, c + r <= 1")
    else:
        if q.shape[1] != 5:
            raise ValueError("rotated-rect query vectors must have length 5")
        if (q[:, :4] < -_Q_EPS).any() or (q[:, :4] > 1 + _Q_EPS).any():
            raise ValueError("rect corners must lie in [0, 1]^2")
        if (q[:, 4] < 0).any() or (q[:, 4] >= np.pi / 2).any():
            raise ValueError("phi must lie in [0, pi/2)")
    return q


def _axis_match(rows: np.ndarray, c: np.ndarray, r: np.ndarray) -> np.ndarray:
    hi = c + r
    above = rows >= c
    below = np.where(hi >= 1.0, rows <= hi, rows < hi)
    return np.all(above & below, axis=1)


def _rect_match(rows: np.ndarray, q: RotatedRectQuery) -> np.ndarray:
    center = (q.p + q.p2) / 2.0
    cos, sin = np.cos(-q.phi), np.sin(-q.phi)
    rel = rows[:, :2] - center
    x = rel[:, 0] * cos - rel[:, 1] * sin + center[0]
    y = rel[:, 0] * sin + rel[:, 1] * cos + center[1]
    lo = np.minimum(q.p, q.p2)
    hi = np.maximum(q.p, q.p2)
    return (x >= lo[0]) & (x < hi[0]) & (y >= lo[1]) & (y < hi[1])


def predicate_eval(q, x: np.ndarray) -> bool:
    """Does point x satisfy query q?  q is a QueryInstance or RotatedRectQuery."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(q, QueryInstance):
        return bool(_axis_match(x, q.c, q.r)[0])
    if isinstance(q, RotatedRectQuery):
        return bool(_rect_match(x, q)[0])
    raise TypeError(f"unsupported query type {type(q).__name__}")


def _aggregate(measure: np.ndarray, agg: Aggregation) -> float:
    m = measure.size
    if agg is Aggregation.COUNT:
        return float(m)
    if agg is Aggregation.SUM:
        return float(measure.sum()) if m else 0.0
    if m == 0:
        return float("nan")  # EMPTY
    if agg is Aggregation.AVG:
        return float(measure.sum() / m)
    if agg is Aggregation.STD:
        return float(np.sqrt(np.mean((measure - measure.mean()) ** 2)))
    if agg is Aggregation.MEDIAN:
        s = np.sort(measure)
        mid = m // 2
        if m % 2 == 1:
            return float(s[mid])
        return float((s[mid - 1] + s[mid]) / 2.0)
    raise ValueError(f"unknown aggregation {agg}")


def oracle_answer(ds: Dataset, q, spec: QuerySpec) -> float | None:
    """Exact answer by full scan; None is the EMPTY value for undefined aggregates."""
    if isinstance(q, QueryInstance):
        mask = _axis_match(ds.rows, q.c, q.r)
    elif isinstance(q, RotatedRectQuery):
        mask = _rect_match(ds.rows, q)
    else:
        raise TypeError(f"unsupported query type {type(q).__name__}")
    value = _aggregate(ds.measure[mask], spec.agg)
    return None if np.isnan(value) else value


class _SortedColumn:
    """Per-dimension sorted view with prefix sums for one-pass range aggregates."""

    def __init__(self, ds: Dataset, dim: int):
        col = ds.rows[:, dim]
        order = np.argsort(col, kind="stable")
        self.values = col[order]
        measure = ds.measure[order]
        self.measure_prefix = np.concatenate([[0.0], np.cumsum(measure)])
        self.measure_sq_prefix = np.concatenate([[0.0], np.cumsum(measure**2)])

    def range_stats(self, lo: np.ndarray, hi: np.ndarray, hi_inclusive: np.ndarray):
        a = np.searchsorted(self.values, lo, side="left")
        b_excl = np.searchsorted(self.values, hi, side="left")
        b_incl = np.searchsorted(self.values, hi, side="right")
        b = np.where(hi_inclusive, b_incl, b_excl)
        count = (b - a).astype(np.float64)
        total = self.measure_prefix[b] - self.measure_prefix[a]
        total_sq = self.measure_sq_prefix[b] - self.measure_sq_prefix[a]
        return count, total, total_sq


class Oracle:
    """Exact-scan oracle over one dataset, with batched evaluation.

    Axis-range COUNT/SUM/AVG/STD queries that restrict at most one
    attribute are answered via a sorted copy of that column and prefix
    sums; everything else falls back to chunked mask scans.
    """

    def __init__(self, ds: Dataset, spec: QuerySpec):
        self.ds = ds
        self.spec = spec
        self._sorted: dict[int, _SortedColumn] = {}

    def _column(self, dim: int) -> _SortedColumn:
        if dim not in self._sorted:
            self._sorted[dim] = _SortedColumn(self.ds, dim)
        return self._sorted[dim]

    def answer(self, q) -> float | None:
        return oracle_answer(self.ds, q, self.spec)

    def answer_batch(self, queries: np.ndarray) -> np.ndarray:
        """Answers for an (m, d) array of query vectors; EMPTY encoded as NaN."""
        queries = validate_query_vectors(queries, self.spec.predicate)
        if self.spec.predicate is PredicateKind.ROTATED_RECT:
            return self._batch_scan(queries)
        half = queries.shape[1] // 2
        c, r = queries[:, :half], queries[:, half:]
        if self.spec.agg is not Aggregation.MEDIAN:
            active = ~((np.abs(c) < 1e-15) & (np.abs(r - 1.0) < 1e-15))
            n_active = active.sum(axis=1)
            fastable = n_active <= 1
            if fastable.all():
                return self._batch_sorted(c, r, active, n_active)
        return self._batch_scan(queries)

    def _batch_sorted(self, c, r, active, n_active) -> np.ndarray:
        n = self.ds.n
        out = np.empty(len(c))
        full = n_active == 0
        # Group the single-active-dimension queries by which dimension it is.
        dim_of = np.where(full, -1, active.argmax(axis=1))
        counts = np.empty(len(c))
        sums = np.empty(len(c))
        sums_sq = np.empty(len(c))
        measure = self.ds.measure
        counts[full] = float(n)
        sums[full] = measure.sum()
        sums_sq[full] = (measure**2).sum()
        for dim in np.unique(dim_of[dim_of >= 0]):
            rows = np.flatnonzero(dim_of == dim)
            col = self._column(int(dim))
            lo = c[rows, dim]
            hi = lo + r[rows, dim]
            cnt, tot, tot_sq = col.range_stats(lo, hi, hi >= 1.0)
            counts[rows] = cnt
            sums[rows] = tot
            sums_sq[rows] = tot_sq
        agg = self.spec.agg
        if agg is Aggregation.COUNT:
            return counts
        if agg is Aggregation.SUM:
            return sums
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = sums / counts
            if agg is Aggregation.AVG:
                out = mean
            else:  # population STD via sum of squares
                var = np.maximum(sums_sq / counts - mean**2, 0.0)
                out = np.sqrt(var)
        out[counts == 0] = np.nan
        return out

    def _batch_scan(self, queries: np.ndarray, chunk: int = 128) -> np.ndarray:
        out = np.empty(len(queries))
        rows = self.ds.rows
        measure = self.ds.measure
        rect = self.spec.predicate is PredicateKind.ROTATED_RECT
        half = queries.shape[1] // 2
        for start in range(0, len(queries), chunk):
            block = queries[start : start + chunk]
            if rect:
                masks = [
                    _rect_match(rows, RotatedRectQuery.from_vector(v)) for v in block
                ]
            else:
                c = block[:, :half, None]
                hi = c + block[:, half:, None]
                cols = rows.T[None, :, :]
                below = np.where(hi >= 1.0, cols <= hi, cols < hi)
                masks = np.all((cols >= c) & below, axis=1)
            for i, mask in enumerate(masks):
                out[start + i] = _aggregate(measure[mask], self.spec.agg)
        return out


def sample_queries(
    spec: QuerySpec,
    dims: int,
    count: int,
    seed: int,
    fixed_range: float | None = None,
) -> np.ndarray:
    """Draw query vectors: random active attributes, random feasible ranges.

    For each query, active_count attributes are chosen uniformly without
    replacement.  An active attribute gets c ~ U(0, 1) then r ~ U(0, 1-c),
    or r = fixed_range with c ~ U(0, 1 - fixed_range) when a fixed range
    fraction is requested.  Inactive attributes carry (c, r) = (0, 1).
    Rotated-rect queries draw both corners uniformly in the unit square
    and phi uniformly in [0, pi/2).
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    if spec.predicate is PredicateKind.ROTATED_RECT:
        if dims < 2:
            raise ValueError("rotated-rect queries need at least 2 data attributes")
        q = np.empty((count, 5))
        q[:, :4] = rng.random((count, 4))
        q[:, 4] = rng.uniform(0.0, np.pi / 2, count)
        return q
    if spec.active_count > dims:
        raise ValueError(
            f"active_count {spec.active_count} exceeds {dims} data attributes"
        )
    c = np.zeros((count, dims))
    r = np.ones((count, dims))
    for i in range(count):
        chosen = rng.choice(dims, size=spec.active_count, replace=False)
        if fixed_range is None:
            ci = rng.random(spec.active_count)
            ri = rng.uniform(0.0, 1.0 - ci)
        else:
            if not (0 < fixed_range <= 1):
                raise ValueError("fixed_range must lie in (0, 1]")
            ri = np.full(spec.active_count, fixed_range)
            ci = rng.uniform(0.0, 1.0 - fixed_range, spec.active_count)
        c[i, chosen] = ci
        r[i, chosen] = ri
    return np.concatenate([c, r], axis=1)


@dataclass(frozen=True)
class TrainingSet:
    """Labeled queries plus the label scale used to standardize training."""

    queries: np.ndarray  # (m, d)
    answers: np.ndarray  # (m,)
    label_mean: float
    label_std: float

    def __post_init__(self):
        q = np.ascontiguousarray(np.asarray(self.queries, dtype=np.float64))
        a = np.ascontiguousarray(np.asarray(self.answers, dtype=np.float64))
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "answers", a)
        if q.ndim != 2 or a.ndim != 1 or len(q) != len(a):
            raise ValueError("queries (m, d) and answers (m,) must align")
        if np.isnan(a).any():
            raise ValueError("training answers must not contain EMPTY labels")

    def __len__(self) -> int:
        return len(self.answers)

    @property
    def d(self) -> int:
        return self.queries.shape[1]


def label_scale(answers: np.ndarray) -> tuple[float, float]:
    """Mean/std for label standardization; std of 1 disables scaling."""
    mean = float(np.mean(answers))
    std = float(np.std(answers))
    if std < 1e-12:
        std = 1.0
    return mean, std


def build_training_set(
    ds: Dataset,
    queries: np.ndarray,
    spec: QuerySpec,
    replacement_seed: int = 0,
    fixed_range: float | None = None,
) -> TrainingSet:
    """Label queries with the exact oracle, replacing EMPTY-answer queries.

    Queries whose answer is undefined (AVG/STD/MEDIAN over zero matches)
    are discarded and replacements drawn until the requested count is met
    or ten times the count has been evaluated in total.
    """
    queries = validate_query_vectors(queries, spec.predicate)
    count = len(queries)
    oracle = Oracle(ds, spec)
    answers = oracle.answer_batch(queries)
    keep = ~np.isnan(answers)
    kept_q = [queries[keep]]
    kept_a = [answers[keep]]
    have = int(keep.sum())
    evaluated = count
    attempt = 0
    while have < count:
        if evaluated >= 10 * count:
            raise TrainingSetError(
                f"could not label {count} queries: {have}/{evaluated} evaluated "
                f"queries had defined answers (match rate {have / evaluated:.3f})"
            )
        need = min(count - have, 10 * count - evaluated)
        attempt += 1
        extra = sample_queries(
            spec,
            queries.shape[1] // 2,
            need,
            seed=replacement_seed + attempt,
            fixed_range=fixed_range,
        )
        extra_answers = oracle.answer_batch(extra)
        ok = ~np.isnan(extra_answers)
        kept_q.append(extra[ok])
        kept_a.append(extra_answers[ok])
        have += int(ok.sum())
        evaluated += need
    all_q = np.concatenate(kept_q)[:count]
    all_a = np.concatenate(kept_a)[:count]
    mean, std = label_scale(all_a)
    return TrainingSet(queries=all_q, answers=all_a, label_mean=mean, label_std=std)


# --- query text files: one query per line -------------------------------

def format_query_line(vector: np.ndarray, predicate: PredicateKind) -> str:
    v = np.asarray(vector, dtype=np.float64)
    if predicate is PredicateKind.AXIS_RANGE:
        half = v.size // 2
        return (
            ",".join(repr(x) for x in v[:half])
            + ";"
            + ",".join(repr(x) for x in v[half:])
        )
    return (
        f"{v[0]!r},{v[1]!r};{v[2]!r},{v[3]!r};{v[4]!r}"
    )


def parse_query_line(line: str, predicate: PredicateKind) -> np.ndarray:
    parts = line.strip().split(";")
    try:
        if predicate is PredicateKind.AXIS_RANGE:
            if len(parts) != 2:
                raise ValueError("expected 'c1,..;r1,..'")
            c = [float(x) for x in parts[0].split(",")]
            r = [float(x) for x in parts[1].split(",")]
            if len(c) != len(r):
                raise ValueError("c and r lengths differ")
            return np.array(c + r)
        if len(parts) != 3:
            raise ValueError("expected 'px,py;px2,py2;phi'")
        p = [float(x) for x in parts[0].split(",")]
        p2 = [float(x) for x in parts[1].split(",")]
        if len(p) != 2 or len(p2) != 2:
            raise ValueError("corners must have 2 coordinates")
        return np.array(p + p2 + [float(parts[2])])
    except ValueError as exc:
        raise FormatError(f"bad query line {line!r}: {exc}") from None


def save_query_file(queries: np.ndarray, predicate: PredicateKind, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.atleast_2d(queries):
            fh.write(format_query_line(v, predicate) + "\n")


def load_query_file(path: str, predicate: PredicateKind) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise FormatError(f"{path}: no queries in file")
    return np.array([parse_query_line(line, predicate) for line in lines])


# --- training-set binary cache -------------------------------------------

def save_training_set(ts: TrainingSet, path: str) -> None:
    """NSTQ cache: magic, count u64, d u16, then (query vector, label) f64 LE."""
    records = np.concatenate([ts.queries, ts.answers[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(TRAINING_MAGIC)
        fh.write(struct.pack("<QH", len(ts), ts.d))
        fh.write(records.astype("<f8").tobytes())


def load_training_set(path: str) -> TrainingSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sQH")
    if len(blob) < head:
        raise FormatError(f"{path}: truncated training-set header")
    magic, count, d = struct.unpack("<4sQH", blob[:head])
    if magic != TRAINING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TRAINING_MAGIC!r}")
    body = blob[head:]
    expected = count * (d + 1) * 8
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} record bytes, got {len(body)}")
    records = np.frombuffer(body, dtype="<f8").reshape(count, d + 1)
    answers = records[:, -1].copy()
    mean, std = label_scale(answers)
    return TrainingSet(
        queries=records[:, :-1].copy(), answers=answers, label_mean=mean, label_std=std
    )
