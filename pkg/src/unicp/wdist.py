"""Finite weighted measures on the real line and their quantiles/thresholds.

Tail masses are accumulated once per measure, from the largest atom down,
and every tail probability and threshold reads the same array. That makes
``tail_prob(m, x) > a`` and ``x <= threshold(...)`` agree bit-for-bit, which
the p-value/threshold dualities rely on.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError

NORMALIZATION_TOL = 1e-9


class _NegInf:
    """Unbounded-below threshold: every real compares greater."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __lt__(self, other):
        return not isinstance(other, _NegInf)

    def __le__(self, other):
        return True

    def __gt__(self, other):
        return False

    def __ge__(self, other):
        return isinstance(other, _NegInf)

    def __eq__(self, other):
        return isinstance(other, _NegInf)

    def __hash__(self):
        return hash("unicp.NEG_INF")

    def __repr__(self):
        return "NEG_INF"

    def __str__(self):
        return "-inf"


NEG_INF = _NegInf()


def is_unbounded(t) -> bool:
    return t is NEG_INF


class WeightedMeasure:
    """Atoms (value, weight) with nonnegative weights and positive total.

    Atoms with equal values are merged on construction; the merged weight is
    the left-to-right sum in input order, so pre-merging the same atoms in
    the same order gives an identical measure.
    """

    __slots__ = ("values", "weights", "_suffix", "_prefix")

    def __init__(self, values: Sequence[float], weights: Sequence[float] | None = None):
        v = np.asarray(values, dtype=float).reshape(-1)
        w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        if v.size == 0:
            raise InvalidArgumentError("measure needs at least one atom")
        if v.shape != w.shape:
            raise InvalidArgumentError("values and weights differ in length")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise InvalidArgumentError("non-finite atom")
        if np.any(w < 0):
            raise InvalidArgumentError("negative weight")
        order = np.argsort(v, kind="stable")
        v, w = v[order], w[order]
        starts = np.flatnonzero(np.r_[True, v[1:] != v[:-1]])
        if starts.size < v.size:
            merged = np.empty(starts.size)
            bounds = np.r_[starts, v.size]
            for g in range(starts.size):
                acc = 0.0
                for j in range(bounds[g], bounds[g + 1]):
                    acc += w[j]
                merged[g] = acc
            v, w = v[starts], merged
        suffix = np.empty(v.size + 1)
        suffix[-1] = 0.0
        suffix[:-1] = np.cumsum(w[::-1])[::-1]
        if not suffix[0] > 0:
            raise InvalidArgumentError("measure has zero total mass")
        self.values = v
        self.weights = w
        self._suffix = suffix
        self._prefix = np.cumsum(w)
        for arr in (self.values, self.weights, self._suffix, self._prefix):
            arr.setflags(write=False)

    @property
    def total(self) -> float:
        return float(self._suffix[0])

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.values.tolist(), self.weights.tolist()))

    def __len__(self):
        return self.values.size

    def normalized(self) -> "WeightedMeasure":
        return WeightedMeasure(self.values, self.weights / self.total)

    def is_normalized(self) -> bool:
        return abs(self.total - 1.0) <= NORMALIZATION_TOL

    def scaled(self, c: float) -> "WeightedMeasure":
        return WeightedMeasure(self.values, self.weights * c)

    def __repr__(self):
        return f"WeightedMeasure({self.atoms!r})"


def tail_prob(m: WeightedMeasure, x: float) -> float:
    """Raw mass of atoms with value >= x (not divided by the total)."""
    j = int(np.searchsorted(m.values, x, side="left"))
    return float(m._suffix[j])


def strict_tail(m: WeightedMeasure, s) -> float:
    """Raw mass of atoms with value > s."""
    if s is NEG_INF:
        return m.total
    j = int(np.searchsorted(m.values, s, side="right"))
    return float(m._suffix[j])


def tail_fraction(m: WeightedMeasure, x: float, scale: float | None = None) -> float:
    """tail_prob(m, x) / scale, with scale defaulting to the total mass."""
    return tail_prob(m, x) / (m.total if scale is None else scale)


def threshold(m: WeightedMeasure, alpha: float, scale: float | None = None):
    """Smallest atom s with strict_tail(m, s) / scale <= alpha, else NEG_INF.

    With the default scale (the total) this is the level 1-alpha quantile of
    the normalized measure; with scale=1 it is the unnormalized threshold.
    """
    scale = m.total if scale is None else float(scale)
    if not scale > 0:
        raise InvalidArgumentError("scale must be positive")
    fractions = m._suffix / scale
    if fractions[0] <= alpha:
        return NEG_INF
    # fractions[k+1] is the strict tail above atom k; nonincreasing in k
    ok = fractions[1:] <= alpha
    k = int(np.argmax(ok))
    return float(m.values[k])


def threshold_unnormalized(m: WeightedMeasure, alpha: float):
    """inf{s : mass of atoms above s <= alpha}; NEG_INF when alpha >= total."""
    if not alpha >= 0:
        raise InvalidArgumentError("alpha must be nonnegative")
    return threshold(m, alpha, scale=1.0)


def quantile(m: WeightedMeasure, tau: float) -> float:
    """inf{x : P(V <= x) >= tau} for a normalized measure."""
    if not m.is_normalized():
        raise InvalidArgumentError(f"quantile needs a normalized measure (total={m.total!r})")
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgumentError(f"quantile level {tau!r} outside [0, 1]")
    cdf = m._prefix / m._prefix[-1]
    k = int(np.searchsorted(cdf, tau, side="left"))
    return float(m.values[min(k, len(m) - 1)])


def inflate_rank(m: int, alpha: float) -> int:
    """Order-statistic rank r in 1..m+1 behind the (1-alpha)(1+1/m) quantile of m values.

    r is the smallest rank whose counting p-value (m+1-r)/(m+1) is <= alpha,
    computed by the same float division the p-value uses, so "test <= r-th
    smallest" matches "p > alpha" bit for bit. r = m+1 means the level exceeds 1.
    """
    if not 0.0 <= alpha < 1.0:
        raise InvalidArgumentError(f"alpha {alpha!r} outside [0, 1)")
    p_at_rank = (m + 1 - np.arange(1, m + 2)) / (m + 1)
    return int(np.argmax(p_at_rank <= alpha)) + 1


def quantile_inflate(values: Sequence[float], alpha: float) -> float:
    """Quantile of the uniform measure on `values` at level (1-alpha)(1+1/m), capped at 1."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise InvalidArgumentError("quantile_inflate needs at least one value")
    rank = min(inflate_rank(v.size, alpha), v.size)  # rank m+1 means level > 1: clipped to the maximum
    return float(np.sort(v, kind="stable")[rank - 1])

