"""Equal-sized cube coarsening of covariate space and the piecewise-constant CATE.

Each group's outcomes are averaged inside every cube; the CATE of a cube is
``mean1 - mean0`` and is defined only where both groups have at least
``min_count`` samples. Cubes are stored sparsely, keyed by a mixed-radix
integer id, so high-dimensional grids stay cheap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import ObservationalDataset
from .numerics import ShapeError

MAX_BINS_PER_DIM = 64
DEFAULT_MIN_COUNT = 5
BOUNDS_EXPANSION = 0.01


def default_bins(n_pooled: int, q: int) -> int:
    """``ceil(n ** (1 / (q + 2)))`` capped at 64."""
    if n_pooled <= 0:
        return 1
    return int(min(MAX_BINS_PER_DIM, max(1, math.ceil(n_pooled ** (1.0 / (q + 2)) - 1e-9))))


@dataclass(frozen=True)
class CubeGrid:
    """Geometry of a ``q``-dimensional equal-sized grid plus per-cube group sums."""

    lower: np.ndarray
    upper: np.ndarray
    bins: np.ndarray
    keys: np.ndarray  # sorted cube ids of every non-empty cube
    count0: np.ndarray
    sum0: np.ndarray
    count1: np.ndarray
    sum1: np.ndarray
    sumsq0: np.ndarray
    sumsq1: np.ndarray
    overflow0: int = 0
    overflow1: int = 0

    @property
    def q(self) -> int:
        return len(self.lower)

    @property
    def width(self) -> np.ndarray:
        return (self.upper - self.lower) / self.bins

    def cube_indices(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension integer cube indices and an in-bounds mask."""
        x = _as_points(x, self.q)
        inside = np.all((x >= self.lower) & (x <= self.upper), axis=1)
        idx = np.floor((x - self.lower) / self.width).astype(np.int64)
        # the upper edge belongs to the last cube
        idx = np.minimum(np.maximum(idx, 0), self.bins - 1)
        return idx, inside

    def cube_ids(self, x) -> tuple[np.ndarray, np.ndarray]:
        idx, inside = self.cube_indices(x)
        return _ravel(idx, self.bins), inside

    def unravel(self, keys) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(keys, dtype=np.int64), tuple(self.bins)), axis=1) if len(keys) \
            else np.zeros((0, self.q), dtype=np.int64)

    def centers(self, keys) -> np.ndarray:
        return self.lower + (self.unravel(keys) + 0.5) * self.width

    def lookup(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """Positions of ``ids`` in :attr:`keys` and whether each was found."""
        pos = np.searchsorted(self.keys, ids)
        pos = np.minimum(pos, max(len(self.keys) - 1, 0))
        found = (self.keys[pos] == ids) if len(self.keys) else np.zeros(len(ids), dtype=bool)
        return pos, found

    def count(self, x) -> np.ndarray:
        """Number of rows of ``x`` falling in each stored cube (aligned with :attr:`keys`)."""
        ids, inside = self.cube_ids(x)
        pos, found = self.lookup(ids[inside])
        return np.bincount(pos[found], minlength=len(self.keys))


def _as_points(x, q):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 and (q == 1 or x.size == q):
        x = x.reshape(-1, q)
    if x.ndim != 2 or x.shape[1] != q:
        raise ShapeError(f"expected points with {q} coordinates, got shape {x.shape}")
    return x


def _ravel(idx, bins):
    if len(idx) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.ravel_multi_index(tuple(idx.T), tuple(int(b) for b in bins))


def _accumulate(ids, y):
    keys, inv = np.unique(ids, return_inverse=True)
    counts = np.bincount(inv, minlength=len(keys))
    sums = np.bincount(inv, weights=y, minlength=len(keys))
    sumsq = np.bincount(inv, weights=y * y, minlength=len(keys))
    return keys, counts, sums, sumsq


def resolve_bounds(x0, x1, bounds_policy="pooled"):
    """Grid bounds: pooled ``[min, max]`` expanded by 1% of the range, or explicit."""
    if bounds_policy == "pooled":
        pooled = np.vstack([x0, x1])
        if len(pooled) == 0:
            raise ValueError("cannot derive pooled bounds from two empty datasets")
        lo, hi = pooled.min(axis=0), pooled.max(axis=0)
        span = hi - lo
        pad = np.where(span > 0, BOUNDS_EXPANSION * span, np.maximum(np.abs(lo) * BOUNDS_EXPANSION, 0.5))
        return lo - pad, hi + pad
    lo, hi = bounds_policy
    lo = np.asarray(lo, dtype=np.float64).reshape(-1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1)
    if lo.shape != hi.shape or lo.size != x0.shape[1]:
        raise ShapeError("explicit bounds must have one (lower, upper) pair per covariate")
    if not (np.isfinite(lo).all() and np.isfinite(hi).all() and (lo < hi).all()):
        raise ValueError("bounds must be finite with lower < upper")
    return lo, hi


def _sample_var(count, total, total_sq):
    with np.errstate(invalid="ignore", divide="ignore"):
        var = (total_sq - total * total / count) / (count - 1)
    return np.where(count > 1, np.maximum(var, 0.0), 0.0)


@dataclass(frozen=True)
class CateFunction:
    grid: CubeGrid
    min_count: int = DEFAULT_MIN_COUNT

    @property
    def q(self) -> int:
        return self.grid.q

    @property
    def supported(self) -> np.ndarray:
        """Mask over :attr:`CubeGrid.keys` of cubes with common support."""
        g = self.grid
        return (g.count0 >= self.min_count) & (g.count1 >= self.min_count)

    def cube_cate(self) -> np.ndarray:
        """CATE per stored cube, NaN where support is missing."""
        g = self.grid
        with np.errstate(invalid="ignore", divide="ignore"):
            cate = g.sum1 / g.count1 - g.sum0 / g.count0
        return np.where(self.supported, cate, np.nan)

    def cube_mean_variance(self, counts=None) -> np.ndarray:
        """Sampling variance of each cube's ``mean1 - mean0`` (NaN where unsupported).

        ``counts=(n0, n1)`` swaps the per-cube sample sizes in the
        denominators (floored at 1) while keeping the within-cube variances
        of the stored samples.
        """
        g = self.grid
        n0, n1 = (g.count0, g.count1) if counts is None else (np.maximum(counts[0], 1), np.maximum(counts[1], 1))
        with np.errstate(invalid="ignore", divide="ignore"):
            v0 = _sample_var(g.count0, g.sum0, g.sumsq0) / n0
            v1 = _sample_var(g.count1, g.sum1, g.sumsq1) / n1
        return np.where(self.supported, v0 + v1, np.nan)

    def evaluate_many(self, x) -> np.ndarray:
        """CATE at each row of ``x``; NaN marks no support."""
        ids, inside = self.grid.cube_ids(x)
        pos, found = self.grid.lookup(ids)
        out = np.full(len(ids), np.nan)
        ok = inside & found
        out[ok] = self.cube_cate()[pos[ok]]
        return out

    def evaluate(self, x):
        """CATE at a single point, or ``None`` when the point lacks common support."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.q:
            raise ShapeError(f"expected a point with {self.q} coordinates, got {x.size}")
        value = self.evaluate_many(x[None, :])[0]
        return None if np.isnan(value) else float(value)


def build_grid(
    synthetic0: ObservationalDataset,
    synthetic1: ObservationalDataset,
    bins_per_dim=None,
    bounds_policy="pooled",
    min_count: int = DEFAULT_MIN_COUNT,
) -> CateFunction:
    """Bin both groups' samples and return the cube-wise CATE.

    ``bins_per_dim`` is an int, one int per covariate, or ``None`` for the
    default growth rule applied to the pooled sample size.
    """
    x0 = synthetic0.covariates
    x1 = synthetic1.covariates
    if x0.shape[1] != x1.shape[1]:
        raise ShapeError(f"covariate dimensions differ: {x0.shape[1]} vs {x1.shape[1]}")
    q = x0.shape[1]
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    if bins_per_dim is None:
        bins = np.full(q, default_bins(len(x0) + len(x1), q), dtype=np.int64)
    else:
        bins = np.broadcast_to(np.asarray(bins_per_dim, dtype=np.int64), (q,)).copy()
    if (bins < 1).any():
        raise ValueError("bins_per_dim must be >= 1 in every dimension")
    if math.prod(int(b) for b in bins) >= 2**62:
        raise ValueError("grid has too many cubes to index; reduce bins_per_dim")
    lo, hi = resolve_bounds(x0, x1, bounds_policy)

    geometry = CubeGrid(lo, hi, bins, *(np.zeros(0),) * 7)
    per_group = []
    overflow = []
    for data in (synthetic0, synthetic1):
        ids, inside = geometry.cube_ids(data.covariates)
        per_group.append(_accumulate(ids[inside], data.outcomes[inside]))
        overflow.append(int((~inside).sum()))
    keys = np.union1d(per_group[0][0], per_group[1][0]).astype(np.int64)
    arrays = []
    for gkeys, counts, sums, sumsq in per_group:
        pos = np.searchsorted(keys, gkeys)
        c = np.zeros(len(keys), dtype=np.int64)
        s = np.zeros(len(keys))
        ss = np.zeros(len(keys))
        c[pos] = counts
        s[pos] = sums
        ss[pos] = sumsq
        arrays.append((c, s, ss))
    (c0, s0, ss0), (c1, s1, ss1) = arrays
    grid = CubeGrid(lo, hi, bins, keys, c0, s0, c1, s1, ss0, ss1, overflow0=overflow[0], overflow1=overflow[1])
    return CateFunction(grid, int(min_count))


SURFACE_FIELDS = ("cube_id", "count0", "count1", "mean0", "mean1", "cate")


def export_cate_surface(cate: CateFunction, path) -> None:
    """Write one CSV row per non-empty cube (centers, counts, means, CATE).

    Means and CATE are left blank where undefined.
    """
    g = cate.grid
    centers = g.centers(g.keys)
    values = cate.cube_cate()
    header = ["cube_id", *(f"center_{j + 1}" for j in range(g.q)), *SURFACE_FIELDS[1:]]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, key in enumerate(g.keys):
            m0 = repr(float(g.sum0[i] / g.count0[i])) if g.count0[i] else ""
            m1 = repr(float(g.sum1[i] / g.count1[i])) if g.count1[i] else ""
            c = "" if np.isnan(values[i]) else repr(float(values[i]))
            w.writerow([int(key), *(repr(float(v)) for v in centers[i]), int(g.count0[i]), int(g.count1[i]), m0, m1, c])


def read_cate_surface(path) -> dict[int, float]:
    """Map cube id to CATE for every supported row of an exported surface."""
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["cate"]:
                out[int(row["cube_id"])] = float(row["cate"])
    return out
