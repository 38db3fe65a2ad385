"""Time-indexed weighted particle data: loading, validation and binning."""

import csv
from dataclasses import dataclass, field

import numpy as np


class CytoDataError(ValueError):
    pass


class ParseError(CytoDataError):
    pass


class OutOfBoundsError(CytoDataError):
    pass


@dataclass(frozen=True, eq=False)
class CytogramSeries:
    """Weighted d-dimensional point clouds observed at ``T`` ordered times.

    Attributes
    ----------
    times : (T,) array
        Strictly increasing time coordinates.
    points : list of (n_t, d) arrays
    weights : list of (n_t,) arrays
        Positive per-point weights (biomass or bin counts).
    """

    times: np.ndarray
    points: list
    weights: list
    _total: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise CytoDataError("need at least one time point")
        if np.any(np.diff(times) <= 0):
            raise CytoDataError("times must be strictly increasing")
        if len(self.points) != times.size or len(self.weights) != times.size:
            raise CytoDataError("points/weights must have one entry per time")
        pts, wts = [], []
        d = None
        for t, (y, w) in enumerate(zip(self.points, self.weights)):
            y = np.asarray(y, dtype=float)
            if y.ndim == 1:
                y = y[:, None]
            w = np.asarray(w, dtype=float).reshape(-1)
            if y.shape[0] < 1:
                raise CytoDataError("time slice %d is empty" % t)
            if y.shape[0] != w.shape[0]:
                raise CytoDataError("time slice %d: %d points but %d weights"
                                    % (t, y.shape[0], w.shape[0]))
            if d is None:
                d = y.shape[1]
            elif y.shape[1] != d:
                raise CytoDataError("time slice %d has dimension %d, expected %d"
                                    % (t, y.shape[1], d))
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
                raise CytoDataError("non-finite values in time slice %d" % t)
            if np.any(w <= 0):
                raise CytoDataError("non-positive weight in time slice %d" % t)
            y.setflags(write=False)
            w.setflags(write=False)
            pts.append(y)
            wts.append(w)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)
        object.__setattr__(self, "_total", float(sum(w.sum() for w in wts)))

    @property
    def T(self):
        return self.times.size

    @property
    def d(self):
        return self.points[0].shape[1]

    @property
    def n(self):
        """Number of stored points per time."""
        return np.array([y.shape[0] for y in self.points])

    @property
    def total_weight(self):
        return self._total

    @property
    def time_weights(self):
        """Total weight ``W_t`` per time."""
        return np.array([w.sum() for w in self.weights])

    def stacked(self):
        """Return ``(y, w, tidx)`` with all points concatenated over time."""
        y = np.concatenate(self.points, axis=0)
        w = np.concatenate(self.weights)
        tidx = np.repeat(np.arange(self.T), self.n)
        return y, w, tidx

    def subset(self, idx):
        """Series restricted to the time indices ``idx`` (0-based, sorted)."""
        idx = np.asarray(idx, dtype=int)
        return CytogramSeries(self.times[idx], [self.points[i] for i in idx],
                              [self.weights[i] for i in idx])


def total_weight(s):
    return s.total_weight


def from_arrays(times, y, w=None):
    """Group flat arrays of ``(time, y[, weight])`` rows by distinct time."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    w = np.ones(times.size) if w is None else np.asarray(w, dtype=float)
    order = np.argsort(times, kind="stable")
    ut, start = np.unique(times[order], return_index=True)
    bounds = list(start[1:]) + [times.size]
    pts = [y[order[a:b]] for a, b in zip(start, bounds)]
    wts = [w[order[a:b]] for a, b in zip(start, bounds)]
    return CytogramSeries(ut, pts, wts)


def load_series(path, format="csv"):
    """Read a CSV with header ``time,y1,...,yd[,weight]``.

    Rows are grouped by distinct time value in ascending order; a missing
    weight column means unit weights.
    """
    if format != "csv":
        raise ValueError("unsupported format %r" % (format,))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("%s: empty file" % path)
        if not header or header[0] != "time":
            raise ParseError("%s: header must start with 'time'" % path)
        has_weight = header[-1] == "weight"
        ycols = header[1:-1] if has_weight else header[1:]
        if not ycols:
            raise ParseError("%s: no measurement columns" % path)
        ncol = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != ncol:
                raise ParseError("%s: row %d has %d fields, expected %d"
                                 % (path, lineno, len(row), ncol))
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError("%s: row %d is not numeric" % (path, lineno))
            if has_weight and not vals[-1] > 0:
                raise CytoDataError("%s: row %d has non-positive weight %r"
                                    % (path, lineno, vals[-1]))
            rows.append(vals)
    if not rows:
        raise ParseError("%s: no data rows" % path)
    arr = np.array(rows)
    w = arr[:, -1] if has_weight else None
    y = arr[:, 1:1 + len(ycols)]
    return from_arrays(arr[:, 0], y, w)


def write_series(s, path, weights=True):
    """Write ``s`` as CSV; values use shortest round-trip float repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        head = ["time"] + ["y%d" % (j + 1) for j in range(s.d)]
        wr.writerow(head + (["weight"] if weights else []))
        for t, y, w in zip(s.times, s.points, s.weights):
            for yi, wi in zip(y, w):
                row = [repr(float(t))] + [repr(float(v)) for v in yi]
                if weights:
                    row.append(repr(float(wi)))
                wr.writerow(row)


@dataclass(frozen=True, eq=False)
class BinGrid:
    """Regular grid of ``prod(D)`` hyper-rectangles between ``lower`` and ``upper``."""

    lower: np.ndarray
    upper: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        D = np.atleast_1d(np.asarray(self.D, dtype=int))
        if D.size == 1 and lo.size > 1:
            D = np.full(lo.size, D[0])
        if not (lo.shape == hi.shape == D.shape):
            raise CytoDataError("grid bounds and bin counts must match in length")
        if np.any(hi <= lo) or np.any(D < 1):
            raise CytoDataError("grid needs upper > lower and D >= 1")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "D", D)

    @property
    def width(self):
        return (self.upper - self.lower) / self.D

    def centers(self, idx):
        """Midpoints of the bins with per-dimension indices ``idx`` (m x d)."""
        return self.lower + (np.asarray(idx) + 0.5) * self.width

    @classmethod
    def from_series(cls, s, D, pad=0.01):
        """Bounds at the data min/max expanded by ``pad`` of the range."""
        y, _, _ = s.stacked()
        lo, hi = y.min(axis=0), y.max(axis=0)
        rng = hi - lo
        rng = np.where(rng > 0, rng, np.maximum(np.abs(hi), 1.0))
        return cls(lo - pad * rng, hi + pad * rng, D)


def bin_series(s, grid, clamp=False):
    """Aggregate each time slice onto the nonempty bins of ``grid``.

    Output points sit at bin centers (ordered by row-major bin index) with
    weight equal to the summed particle weight.
    """
    if grid.lower.size != s.d:
        raise CytoDataError("grid has dimension %d, data %d" % (grid.lower.size, s.d))
    pts, wts = [], []
    for t, (y, w) in enumerate(zip(s.points, s.weights)):
        rel = (y - grid.lower) / grid.width
        idx = np.floor(rel).astype(np.int64)
        # points exactly on the upper edge belong to the last bin
        idx = np.where((idx == grid.D) & (y <= grid.upper), grid.D - 1, idx)
        bad = np.any((idx < 0) | (idx >= grid.D), axis=1)
        if np.any(bad):
            if not clamp:
                i = int(np.flatnonzero(bad)[0])
                raise OutOfBoundsError(
                    "time index %d, point %d at %s lies outside the grid"
                    % (t, i, np.array2string(y[i])))
            idx = np.clip(idx, 0, grid.D - 1)
        lin = np.ravel_multi_index(idx.T, tuple(grid.D))
        ub, inv = np.unique(lin, return_inverse=True)
        agg = np.bincount(inv.reshape(-1), weights=w, minlength=ub.size)
        cidx = np.stack(np.unravel_index(ub, tuple(grid.D)), axis=1)
        pts.append(grid.centers(cidx))
        wts.append(agg)
    return CytogramSeries(s.times.copy(), pts, wts)
