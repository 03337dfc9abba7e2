"""Ordered datasets, bags, permutations and nonconformity scores.

Indices are 0-based throughout: a dataset of n+1 points has the test point
at position ``n`` and ``swap(z, n)`` is the identity.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidArgumentError

RIDGE = 1e-8


def _as_vector(x) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgumentError(f"feature must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("feature vector has non-finite entries")
    # +0.0 folds negative zero so equal points hash equally
    return tuple(float(v) + 0.0 for v in arr)


@dataclass(frozen=True)
class DataPoint:
    x: tuple[float, ...]
    y: float

    def __init__(self, x, y):
        y = float(y)
        if not math.isfinite(y):
            raise InvalidArgumentError("response must be finite")
        object.__setattr__(self, "x", _as_vector(x))
        object.__setattr__(self, "y", y + 0.0)

    @property
    def dim(self) -> int:
        return len(self.x)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class _PointArray:
    """Shared storage for Dataset and Bag: an (m, d) feature block and m responses."""

    __slots__ = ("X", "y", "_points", "_hash")

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = _freeze(X)
        self.y = _freeze(y)
        self._points = None
        self._hash = None

    @classmethod
    def _from_points(cls, points: Sequence[DataPoint]):
        points = list(points)
        if not points:
            raise InvalidArgumentError(f"{cls.__name__} needs at least one point")
        for p in points:
            if not isinstance(p, DataPoint):
                raise InvalidArgumentError(f"expected DataPoint, got {type(p).__name__}")
        d = points[0].dim
        if any(p.dim != d for p in points):
            raise InvalidArgumentError("feature dimension differs across points")
        X = np.array([p.x for p in points], dtype=float).reshape(len(points), d)
        y = np.array([p.y for p in points], dtype=float)
        return X, y

    @staticmethod
    def _check_arrays(X, y):
        X = np.array(X, dtype=float)
        y = np.array(y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0 or X.shape[1] == 0:
            raise InvalidArgumentError(f"incompatible shapes X{X.shape}, y{y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidArgumentError("non-finite values in data")
        return X + 0.0, y + 0.0

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def points(self) -> tuple[DataPoint, ...]:
        if self._points is None:
            self._points = tuple(DataPoint(x, y) for x, y in zip(self.X, self.y))
        return self._points

    def __getitem__(self, i) -> DataPoint:
        return self.points[i]

    def __iter__(self):
        return iter(self.points)

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((type(self).__name__, self.X.shape, self.X.tobytes(), self.y.tobytes()))
        return self._hash

    def __repr__(self):
        body = ", ".join(f"({', '.join(f'{v:g}' for v in x)}; {y:g})" for x, y in zip(self.X, self.y))
        return f"{type(self).__name__}[{body}]"


class Dataset(_PointArray):
    """Ordered sequence of data points with a common feature dimension."""

    __slots__ = ()

    def __init__(self, points: Sequence[DataPoint]):
        X, y = self._from_points(points)
        super().__init__(X, y)

    @classmethod
    def from_arrays(cls, X, y) -> "Dataset":
        X, y = cls._check_arrays(X, y)
        obj = cls.__new__(cls)
        _PointArray.__init__(obj, X, y)
        return obj

    @classmethod
    def _trusted(cls, X: np.ndarray, y: np.ndarray) -> "Dataset":
        obj = cls.__new__(cls)
        _PointArray.__init__(obj, X, y)
        return obj

    @property
    def n(self) -> int:
        """Number of training points (length minus one)."""
        return len(self) - 1

    @property
    def last(self) -> DataPoint:
        return self.points[-1]

    def head(self, k: int) -> "Dataset":
        return Dataset._trusted(self.X[:k].copy(), self.y[:k].copy())


class Bag(_PointArray):
    """Multiset of points stored in canonical lexicographic order of (x..., y)."""

    __slots__ = ()

    def __init__(self, points: Sequence[DataPoint]):
        X, y = self._from_points(points)
        order = _lex_order(X, y)
        super().__init__(X[order], y[order])

    @classmethod
    def _trusted(cls, X, y) -> "Bag":
        obj = cls.__new__(cls)
        _PointArray.__init__(obj, X, y)
        return obj

    def as_dataset(self) -> Dataset:
        return Dataset._trusted(self.X.copy(), self.y.copy())


def _lex_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # np.lexsort uses the last key as primary
    keys = (y,) + tuple(X[:, j] for j in range(X.shape[1] - 1, -1, -1))
    return np.lexsort(keys)


@dataclass(frozen=True)
class Permutation:
    mapping: tuple[int, ...]

    def __init__(self, mapping):
        mapping = tuple(int(i) for i in mapping)
        if sorted(mapping) != list(range(len(mapping))):
            raise InvalidArgumentError(f"not a permutation: {mapping}")
        object.__setattr__(self, "mapping", mapping)

    def __len__(self):
        return len(self.mapping)

    def __getitem__(self, i):
        return self.mapping[i]

    @property
    def last(self) -> int:
        return self.mapping[-1]

    def compose(self, other: "Permutation") -> "Permutation":
        """Return self∘other, so that apply_perm(z, self∘other) == apply_perm(apply_perm(z, self), other)."""
        return Permutation(self.mapping[j] for j in other.mapping)

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.mapping)
        for i, j in enumerate(self.mapping):
            inv[j] = i
        return Permutation(inv)


def identity(size: int) -> Permutation:
    return Permutation(range(size))


def transposition(size: int, k: int) -> Permutation:
    """Permutation exchanging position k with the last position."""
    m = list(range(size))
    m[k], m[-1] = m[-1], m[k]
    return Permutation(m)


def all_permutations(size: int) -> Iterator[Permutation]:
    for p in itertools.permutations(range(size)):
        yield Permutation(p)


def augment(training: Sequence[DataPoint], x_test, y_candidate: float) -> Dataset:
    """Append the test point (x_test, y_candidate) to the training points."""
    training = list(training)
    if len(training) < 1:
        raise InvalidArgumentError("need at least one training point")
    return Dataset(training + [DataPoint(x_test, y_candidate)])


def swap(z: Dataset, k: int) -> Dataset:
    """Exchange position k with the last position; swap(z, len(z)-1) is z."""
    m = len(z)
    if not 0 <= k < m:
        raise IndexError(f"swap index {k} outside [0, {m - 1}]")
    idx = np.arange(m)
    idx[k], idx[-1] = m - 1, k
    return Dataset._trusted(z.X[idx], z.y[idx])


def to_bag(z: Dataset) -> Bag:
    order = _lex_order(z.X, z.y)
    return Bag._trusted(z.X[order], z.y[order])


def apply_perm(z: Dataset, sigma: Permutation | Sequence[int]) -> Dataset:
    """Return z_σ with (z_σ)_i = z_{σ(i)}."""
    idx = np.asarray(sigma.mapping if isinstance(sigma, Permutation) else sigma, dtype=int)
    if idx.shape != (len(z),):
        raise InvalidArgumentError("permutation size does not match dataset")
    return Dataset._trusted(z.X[idx], z.y[idx])


def perm_between(reference: Dataset | Bag, target: Dataset) -> Permutation:
    """Some σ with apply_perm(reference, σ) == target, assuming equal bags."""
    r_order = _lex_order(reference.X, reference.y)
    t_order = _lex_order(target.X, target.y)
    sigma = np.empty(len(target), dtype=int)
    sigma[t_order] = r_order
    return Permutation(sigma)


# ---------------------------------------------------------------- scores


class BagScore:
    """Score s(point, bag) that only sees the unordered bag."""

    symmetric = True

    def __init__(self, fn: Callable[[DataPoint, Bag], float], name: str = "bag_score"):
        self.fn = fn
        self.name = name

    def __call__(self, point: DataPoint, bag: Bag) -> float:
        return float(self.fn(point, bag))

    def batch(self, X: np.ndarray, y: np.ndarray, bag: Bag) -> np.ndarray:
        """Scores of the rows (X[i], y[i]) against one bag."""
        return np.array([self(DataPoint(x, v), bag) for x, v in zip(X, y)])

    def __repr__(self):
        return f"BagScore({self.name})"


class SplitScore:
    """Score s(point, prefix) fitted on a fixed training prefix."""

    symmetric = False

    def __init__(self, fn: Callable[[DataPoint, Dataset], float], name: str = "split_score"):
        self.fn = fn
        self.name = name

    def __call__(self, point: DataPoint, prefix: Dataset) -> float:
        return float(self.fn(point, prefix))

    def batch(self, X: np.ndarray, y: np.ndarray, prefix: Dataset) -> np.ndarray:
        return np.array([self(DataPoint(x, v), prefix) for x, v in zip(X, y)])

    def __repr__(self):
        return f"SplitScore({self.name})"


class OrderedScore:
    """Score s(point, dataset) that may depend on the order of the dataset."""

    symmetric = False

    def __init__(self, fn: Callable[[DataPoint, Dataset], float], name: str = "ordered_score"):
        self.fn = fn
        self.name = name

    def __call__(self, point: DataPoint, data: Dataset) -> float:
        return float(self.fn(point, data))

    def permuted_last_scores(self, z: Dataset, perms: np.ndarray) -> np.ndarray:
        """s((z_σ)_last, z_σ) for every row σ of an (M, n+1) index array."""
        out = np.empty(len(perms))
        for m, sigma in enumerate(perms):
            zs = apply_perm(z, sigma)
            out[m] = self(zs.last, zs)
        return out

    def __repr__(self):
        return f"OrderedScore({self.name})"


def lift(score: BagScore) -> OrderedScore:
    """View a bag score as an ordered score that ignores the order."""
    lifted = OrderedScore(lambda p, data: score(p, to_bag(data)), name=f"lift({score.name})")
    lifted.symmetric = True
    return lifted


def score_vector(score: OrderedScore, z: Dataset) -> np.ndarray:
    """g(z) = (s(z_1, z), ..., s(z_{n+1}, z))."""
    if isinstance(score, BagScore):
        return score.batch(z.X, z.y, to_bag(z))
    return np.array([score(p, z) for p in z.points])


def _require_nonempty(data, what: str):
    if data is None or len(data) == 0:
        raise InvalidArgumentError(f"empty {what}")


def _ridge_solve(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    d = X.shape[1]
    if w is None:
        A = X.T @ X
        b = X.T @ y
    else:
        A = (X * w[:, None]).T @ X
        b = (X * w[:, None]).T @ y
    return np.linalg.solve(A + RIDGE * np.eye(d), b)


class _AbsResidualMean(BagScore):
    def __init__(self):
        super().__init__(self._one, name="abs_residual_mean")

    def _one(self, point, bag):
        return self.batch(np.array([point.x]), np.array([point.y]), bag)[0]

    def batch(self, X, y, bag):
        _require_nonempty(bag, "bag")
        return np.abs(np.asarray(y, dtype=float) - bag.y.mean())


class _AbsResidualLS(BagScore):
    def __init__(self):
        super().__init__(self._one, name="abs_residual_ls")

    def _one(self, point, bag):
        return self.batch(np.array([point.x]), np.array([point.y]), bag)[0]

    def batch(self, X, y, bag):
        _require_nonempty(bag, "bag")
        beta = _ridge_solve(bag.X, bag.y)
        return np.abs(np.asarray(y, dtype=float) - np.asarray(X, dtype=float) @ beta)


class _RecencyWeightedLS(OrderedScore):
    def __init__(self, decay: float):
        if not 0.0 < decay <= 1.0:
            raise InvalidArgumentError("decay must lie in (0, 1]")
        self.decay = float(decay)
        super().__init__(self._one, name=f"recency_weighted_ls({decay:g})")

    def _weights(self, m: int) -> np.ndarray:
        return self.decay ** np.arange(m - 1, -1, -1, dtype=float)

    def _fit_batch(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        # X: (M, m, d), y: (M, m)
        w = self._weights(X.shape[1])
        A = np.einsum("i,kij,kil->kjl", w, X, X) + RIDGE * np.eye(X.shape[2])
        b = np.einsum("i,kij,ki->kj", w, X, y)
        return np.linalg.solve(A, b[..., None])[..., 0]

    def _one(self, point, data):
        _require_nonempty(data, "dataset")
        beta = self._fit_batch(data.X[None], data.y[None])[0]
        return abs(point.y - float(np.dot(np.asarray(point.x), beta)))

    def permuted_last_scores(self, z, perms):
        perms = np.asarray(perms, dtype=int)
        Xp = z.X[perms]
        yp = z.y[perms]
        beta = self._fit_batch(Xp, yp)
        pred = np.einsum("kj,kj->k", Xp[:, -1, :], beta)
        return np.abs(yp[:, -1] - pred)


class _KnnResidual(SplitScore):
    def __init__(self, k: int):
        if int(k) < 1:
            raise InvalidArgumentError("k must be at least 1")
        self.k = int(k)
        super().__init__(self._one, name=f"knn_residual({k})")

    def _one(self, point, prefix):
        return self.batch(np.array([point.x]), np.array([point.y]), prefix)[0]

    def batch(self, X, y, prefix):
        _require_nonempty(prefix, "prefix")
        X = np.asarray(X, dtype=float)
        dist = np.linalg.norm(X[:, None, :] - prefix.X[None, :, :], axis=2)
        k = min(self.k, len(prefix))
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        return np.abs(np.asarray(y, dtype=float) - prefix.y[nearest].mean(axis=1))


def abs_residual_mean() -> BagScore:
    """|y - mean response of the bag|."""
    return _AbsResidualMean()


def abs_residual_ls() -> BagScore:
    """|y - x'b| with b a ridge least-squares fit on the bag (no intercept)."""
    return _AbsResidualLS()


def recency_weighted_ls(decay: float) -> OrderedScore:
    """|y - x'b| with b fitted by weighted least squares, weight decay**(n-i) on position i."""
    return _RecencyWeightedLS(decay)


def knn_residual(k: int) -> SplitScore:
    """|y - mean response of the k nearest prefix points|."""
    return _KnnResidual(k)
