"""Count matrices, position traces, binning and train/test splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyData, InvalidWindow, LengthMismatch, ParseError, RangeError, ValidationError

DEFAULT_BIN_WIDTH = 0.25


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CountMatrix:
    """C x T spike counts, one row per cell."""

    counts: np.ndarray
    bin_width: float = DEFAULT_BIN_WIDTH
    cell_ids: tuple = field(default=())

    def __post_init__(self):
        counts = np.array(self.counts)
        if counts.ndim != 2:
            raise ValidationError(f"counts must be 2-d (C x T), got shape {counts.shape}")
        if counts.size and (np.any(counts < 0) or np.any(counts != np.round(counts))):
            raise ValidationError("counts must be nonnegative integers")
        object.__setattr__(self, "counts", _frozen(counts.astype(np.int64)))
        ids = tuple(self.cell_ids) if len(self.cell_ids) else tuple(f"c{i}" for i in range(counts.shape[0]))
        if len(ids) != counts.shape[0]:
            raise LengthMismatch(f"{len(ids)} cell ids for {counts.shape[0]} rows")
        object.__setattr__(self, "cell_ids", ids)

    @property
    def C(self) -> int:
        return self.counts.shape[0]

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    def require_nonempty(self):
        if self.C == 0 or self.T == 0:
            raise EmptyData(f"count matrix is empty (C={self.C}, T={self.T})")
        return self

    def columns(self, start: int, stop: int) -> "CountMatrix":
        return CountMatrix(self.counts[:, start:stop], self.bin_width, self.cell_ids)


@dataclass(frozen=True)
class PositionTrace:
    """Per-bin animal position. Polar coordinates are relative to ``center``."""

    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        speed = np.asarray(self.speed, dtype=float)
        if not (x.shape == y.shape == speed.shape) or x.ndim != 1:
            raise LengthMismatch("x, y and speed must be 1-d arrays of equal length")
        object.__setattr__(self, "x", _frozen(x.copy()))
        object.__setattr__(self, "y", _frozen(y.copy()))
        object.__setattr__(self, "speed", _frozen(speed.copy()))
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def __len__(self):
        return self.x.shape[0]

    @property
    def t_index(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def r(self) -> np.ndarray:
        return np.hypot(self.x - self.center[0], self.y - self.center[1])

    @property
    def theta(self) -> np.ndarray:
        th = np.arctan2(self.y - self.center[1], self.x - self.center[0])
        # map pi onto -pi so theta lies in [-pi, pi)
        return np.where(th >= np.pi, -np.pi, th)

    def select(self, idx) -> "PositionTrace":
        return PositionTrace(self.x[idx], self.y[idx], self.speed[idx], self.center)

    @classmethod
    def from_xy(cls, x, y, speed, center=None) -> "PositionTrace":
        """Build a trace; the arena center defaults to the centroid of the positions."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if center is None:
            center = (float(x.mean()), float(y.mean())) if x.size else (0.0, 0.0)
        return cls(x, y, speed, center)


@dataclass(frozen=True)
class SplitSpec:
    """Contiguous half-open train and test ranges, train first."""

    train_range: tuple
    test_range: tuple

    def __post_init__(self):
        (a, b), (c, d) = self.train_range, self.test_range
        if not (0 <= a <= b <= c <= d):
            raise RangeError(f"invalid split {self.train_range}, {self.test_range}")

    @classmethod
    def holdout(cls, T: int, T_test: int) -> "SplitSpec":
        return cls((0, T - T_test), (T - T_test, T))


# ingestion

def load_counts(path, format: str = "csv", bin_width: float = DEFAULT_BIN_WIDTH) -> CountMatrix:
    """Read a ``cell_id,t0,t1,...`` CSV into a :class:`CountMatrix`."""
    if format != "csv":
        raise ValidationError(f"unsupported counts format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyData(f"{path} is empty") from None
        if not header or header[0].strip() != "cell_id":
            raise ParseError(0, 0, "header must start with 'cell_id'")
        T = len(header) - 1
        ids, rows = [], []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != T + 1:
                raise ParseError(r, len(row), f"expected {T + 1} fields, got {len(row)}")
            vals = []
            for c, cell in enumerate(row[1:], start=1):
                try:
                    v = int(cell.strip())
                except ValueError:
                    raise ParseError(r, c, f"not an integer: {cell!r}") from None
                if v < 0:
                    raise ParseError(r, c, f"negative count {v}")
                vals.append(v)
            ids.append(row[0].strip())
            rows.append(vals)
    if not rows or T == 0:
        raise EmptyData(f"{path} holds no counts (C={len(rows)}, T={T})")
    return CountMatrix(np.array(rows, dtype=np.int64), bin_width, tuple(ids))


def save_counts(counts: CountMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id"] + [f"t{t}" for t in range(counts.T)])
        for cid, row in zip(counts.cell_ids, counts.counts):
            w.writerow([cid] + [int(v) for v in row])


def load_positions(path, center=None) -> PositionTrace:
    """Read a ``t,x_cm,y_cm,speed_cms`` CSV (one row per count bin)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        expected = ["t", "x_cm", "y_cm", "speed_cms"]
        if header != expected:
            raise ParseError(0, 0, f"header must be {','.join(expected)}")
        vals = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(r, len(row), "expected 4 fields")
            try:
                vals.append([float(v) for v in row])
            except ValueError:
                raise ParseError(r, 0, "non-numeric value") from None
    if not vals:
        raise EmptyData(f"{path} holds no positions")
    a = np.array(vals)
    order = np.argsort(a[:, 0], kind="stable")
    a = a[order]
    return PositionTrace.from_xy(a[:, 1], a[:, 2], a[:, 3], center=center)


def save_positions(pos: PositionTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x_cm", "y_cm", "speed_cms"])
        for t in range(len(pos)):
            w.writerow([t, repr(float(pos.x[t])), repr(float(pos.y[t])), repr(float(pos.speed[t]))])


# binning

def n_bins(t_start: float, t_end: float, bin_width: float) -> int:
    return int(math.ceil((t_end - t_start) / bin_width - 1e-12))


def bin_spikes(spike_times: Sequence[Sequence[float]], bin_width: float = DEFAULT_BIN_WIDTH,
               t_start: float = 0.0, t_end: float | None = None, cell_ids=()) -> CountMatrix:
    """Count spikes per cell in half-open bins ``[t_start + k*w, t_start + (k+1)*w)``.

    Spikes at or after ``t_end`` are dropped.
    """
    if bin_width <= 0:
        raise InvalidWindow(f"bin width must be positive, got {bin_width}")
    if t_end is None:
        t_end = max((max(s) for s in spike_times if len(s)), default=t_start) + bin_width
    if t_end <= t_start:
        raise InvalidWindow(f"t_end ({t_end}) must exceed t_start ({t_start})")
    T = n_bins(t_start, t_end, bin_width)
    counts = np.zeros((len(spike_times), T), dtype=np.int64)
    for c, times in enumerate(spike_times):
        s = np.asarray(times, dtype=float)
        s = s[(s >= t_start) & (s < t_end)]
        k = np.floor((s - t_start) / bin_width).astype(np.int64)
        k = np.minimum(k, T - 1)
        np.add.at(counts[c], k, 1)
    return CountMatrix(counts, bin_width, cell_ids)


def bin_positions(times, x, y, bin_width: float, t_start: float, T: int, center=None) -> PositionTrace:
    """Average raw tracker samples within each count bin.

    Speed is the displacement between consecutive bin means divided by the
    bin width. Bins without samples carry the previous bin's position.
    """
    times = np.asarray(times, dtype=float)
    k = np.floor((times - t_start) / bin_width).astype(np.int64)
    keep = (k >= 0) & (k < T)
    k = k[keep]
    n = np.bincount(k, minlength=T).astype(float)
    sx = np.bincount(k, weights=np.asarray(x, float)[keep], minlength=T)
    sy = np.bincount(k, weights=np.asarray(y, float)[keep], minlength=T)
    bx = np.full(T, np.nan)
    by = np.full(T, np.nan)
    has = n > 0
    bx[has] = sx[has] / n[has]
    by[has] = sy[has] / n[has]
    for t in range(T):
        if not has[t]:
            bx[t] = bx[t - 1] if t else (bx[has][0] if has.any() else 0.0)
            by[t] = by[t - 1] if t else (by[has][0] if has.any() else 0.0)
    step = np.hypot(np.diff(bx, prepend=bx[:1]), np.diff(by, prepend=by[:1]))
    return PositionTrace.from_xy(bx, by, step / bin_width, center=center)


def filter_run_epochs(counts: CountMatrix, pos: PositionTrace, speed_threshold: float = 10.0):
    """Keep bins whose speed exceeds the threshold; the kept bins are concatenated in order.

    Gaps between kept epochs are treated as contiguous by every downstream model.
    """
    if counts.T != len(pos):
        raise LengthMismatch(f"counts have {counts.T} bins but positions have {len(pos)}")
    idx = np.flatnonzero(pos.speed > speed_threshold)
    return CountMatrix(counts.counts[:, idx], counts.bin_width, counts.cell_ids), pos.select(idx)


def split(counts: CountMatrix, spec: SplitSpec):
    """Slice ``counts`` into contiguous train and test blocks."""
    if spec.test_range[1] > counts.T or spec.train_range[1] > counts.T:
        raise RangeError(f"split {spec} exceeds T={counts.T}")
    return counts.columns(*spec.train_range), counts.columns(*spec.test_range)
