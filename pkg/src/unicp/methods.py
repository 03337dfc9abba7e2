"""Conformal methods as (partial information, conditional model, score) triples.

Every method object exposes the same small surface:

``draw_aux(training, x_test, rng)``
    auxiliary randomness, drawn once per prediction set (None if unused)
``pvalue(z, aux, alpha)``
    the p-value that defines the prediction set
``engine_pvalue(z, aux, alpha)``
    the p-value of the unified engine on this method's model
``quantile_member(z, aux, alpha)``
    membership computed straight from the weighted-quantile rule
``permutation_weight(z, aux, sigma)`` / ``oracle_score(z, aux)``
    the model written over all (n+1)! reorderings, for the oracle
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from . import engine, wdist
from .core import (
    BagScore,
    DataPoint,
    Dataset,
    OrderedScore,
    Permutation,
    SplitScore,
    apply_perm,
    perm_between,
    score_vector,
    swap,
    to_bag,
    transposition,
)
from .engine import (
    BagOnly,
    BagWithAnchor,
    BagWithIndexAnchor,
    BagWithPrefix,
    ConditionalModel,
    PValueResult,
    SwappedData,
)
from .errors import (
    AbsoluteContinuityError,
    CapacityError,
    ConfigurationError,
    InvalidArgumentError,
    ModelError,
)

# ------------------------------------------------------------ kernels


@dataclass(frozen=True)
class Gaussian:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidArgumentError("bandwidth must be positive")

    def log_h(self, X: np.ndarray, anchor) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = X.shape[1]
        sq = np.sum((X - np.asarray(anchor, dtype=float)) ** 2, axis=1)
        return -sq / (2 * self.bandwidth**2) - 0.5 * d * math.log(2 * math.pi * self.bandwidth**2)

    def sample(self, x, rng: np.random.Generator) -> tuple[float, ...]:
        x = np.asarray(x, dtype=float).reshape(-1)
        return tuple(x + self.bandwidth * rng.standard_normal(x.size))

    def quadrature(self, x, nodes: int) -> list[tuple[tuple[float, ...], float]]:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != 1:
            raise CapacityError("anchor quadrature is implemented for 1-d features only")
        t, w = np.polynomial.hermite_e.hermegauss(nodes)
        w = w / w.sum()
        return [((float(x[0] + self.bandwidth * ti),), float(wi)) for ti, wi in zip(t, w)]


@dataclass(frozen=True)
class Box:
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidArgumentError("radius must be positive")

    def _log_volume(self, d: int) -> float:
        return 0.5 * d * math.log(math.pi) + d * math.log(self.radius) - gammaln(d / 2 + 1)

    def log_h(self, X: np.ndarray, anchor) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        dist = np.linalg.norm(X - np.asarray(anchor, dtype=float), axis=1)
        return np.where(dist <= self.radius, -self._log_volume(X.shape[1]), -np.inf)

    def sample(self, x, rng: np.random.Generator) -> tuple[float, ...]:
        x = np.asarray(x, dtype=float).reshape(-1)
        d = x.size
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        r = self.radius * rng.random() ** (1.0 / d)
        return tuple(x + r * direction)

    def quadrature(self, x, nodes: int) -> list[tuple[tuple[float, ...], float]]:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != 1:
            raise CapacityError("anchor quadrature is implemented for 1-d features only")
        t, w = np.polynomial.legendre.leggauss(nodes)
        w = w / w.sum()
        return [((float(x[0] + self.radius * ti),), float(wi)) for ti, wi in zip(t, w)]


KernelSpec = Gaussian | Box


def kernel_matrix(kernel: KernelSpec, X: np.ndarray) -> np.ndarray:
    """Row-normalized kernel matrix: entry (i, k) is H(x_i, x_k) / sum_j H(x_i, x_j)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    logH = np.vstack([kernel.log_h(X, X[i]) for i in range(X.shape[0])])
    logH = logH.T  # symmetric kernels, but keep (i, k) = H(x_i, x_k) explicit
    return np.exp(logH - logsumexp(logH, axis=1, keepdims=True))


# ------------------------------------------------------------ point weights


class PointWeight:
    """Point-weight callback backed by a vectorized log-weight function of the features.

    Plain callables work wherever a weight is expected; this class only adds
    the array fast path used by the methods and the robustness estimators.
    """

    def __init__(self, log_fn: Callable[[np.ndarray], np.ndarray], name: str = "weight"):
        self._log = log_fn
        self.name = name

    def __call__(self, point: DataPoint) -> float:
        return float(np.exp(self._log(np.asarray(point.x, dtype=float)[None, :])[0]))

    def on_arrays(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.exp(self._log(np.atleast_2d(np.asarray(X, dtype=float))))

    def scaled(self, c: float) -> "PointWeight":
        if not c > 0:
            raise InvalidArgumentError("scale must be positive")
        shift = math.log(c)
        return PointWeight(lambda X: self._log(X) + shift, name=f"{c:g}*{self.name}")


def point_weights(w, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """w evaluated at every row, through the array fast path when the callback has one."""
    if hasattr(w, "on_arrays"):
        return np.asarray(w.on_arrays(X, y), dtype=float)
    return np.array([float(w(DataPoint(x, v))) for x, v in zip(X, y)])


# ------------------------------------------------------------ NexCP weights


class NexWeights:
    """Fixed weights over positions with the last position weighted the most."""

    def __init__(self, w: Sequence[float]):
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.size < 2:
            raise ConfigurationError("need weights for at least two positions")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigurationError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"weights sum to {w.sum()!r}, not 1")
        if np.any(w[:-1] > w[-1]):
            raise ConfigurationError("the last weight must be at least every other weight")
        w.setflags(write=False)
        self.w = w

    @classmethod
    def geometric(cls, size: int, rate: float) -> "NexWeights":
        """w_i proportional to rate**(size-1-i), including the test position."""
        if not 0 < rate <= 1:
            raise ConfigurationError("rate must be in (0, 1]")
        raw = rate ** np.arange(size - 1, -1, -1, dtype=float)
        return cls(raw / raw.sum())

    def __len__(self):
        return self.w.size


# ------------------------------------------------------------ likelihood ratios


class LikelihoodRatio:
    """log f(z_σ)/f(z) as a function of (z, σ).

    Either a scalar callback ``fn(z, sigma)`` or a vectorized
    ``batch(z, perms)`` over an (M, n+1) index array may be supplied.
    """

    def __init__(self, fn: Callable[[Dataset, Permutation], float] | None = None,
                 batch: Callable[[Dataset, np.ndarray], np.ndarray] | None = None,
                 name: str = "lr"):
        if fn is None and batch is None:
            raise ConfigurationError("likelihood ratio needs fn or batch")
        self._fn = fn
        self._batch = batch
        self.name = name

    def __call__(self, z: Dataset, sigma) -> float:
        if self._fn is not None:
            sigma = sigma if isinstance(sigma, Permutation) else Permutation(sigma)
            return float(self._fn(z, sigma))
        idx = sigma.mapping if isinstance(sigma, Permutation) else sigma
        return float(self._batch(z, np.asarray([idx], dtype=int))[0])

    def batch(self, z: Dataset, perms: np.ndarray) -> np.ndarray:
        perms = np.asarray(perms, dtype=int)
        if self._batch is not None:
            return np.asarray(self._batch(z, perms), dtype=float)
        return np.array([self._fn(z, Permutation(p)) for p in perms], dtype=float)

    @classmethod
    def from_log_density(cls, log_f: Callable[[Dataset], float], name: str = "lr") -> "LikelihoodRatio":
        return cls(lambda z, s: log_f(apply_perm(z, s)) - log_f(z), name=name)

    @classmethod
    def feature_only(cls, fn_x: Callable[[np.ndarray, Permutation], float], name: str = "feature_lr") -> "LikelihoodRatio":
        """Ratio that only reads the feature block z.X."""
        return cls(lambda z, s: fn_x(z.X, s), name=name)

    @classmethod
    def exchangeable(cls) -> "LikelihoodRatio":
        return cls(batch=lambda z, perms: np.zeros(len(perms)), name="exchangeable")

    @classmethod
    def product(cls, log_point_density: Sequence[Callable[[DataPoint], float]], name: str = "product") -> "LikelihoodRatio":
        """Independent coordinates: log f(z) = sum_i log f_i(z_i)."""
        def log_f(z):
            return sum(f(p) for f, p in zip(log_point_density, z.points))
        return cls.from_log_density(log_f, name=name)


def _all_perm_array(size: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(size))), dtype=int).reshape(-1, size)


def _check_identity(lr: LikelihoodRatio, z: Dataset):
    at_id = lr(z, Permutation(range(len(z))))
    if not np.isfinite(at_id):
        raise InvalidArgumentError("likelihood ratio is not finite at the identity")
    if abs(at_id) > 1e-9:
        raise InvalidArgumentError(f"log likelihood ratio at the identity is {at_id!r}, not 0")


# ------------------------------------------------------------ method base


class Method:
    """Shared plumbing; subclasses fill in partial_info, model and the quantile rule."""

    name = "method"
    normalized = True
    score = None
    model: ConditionalModel

    def draw_aux(self, training, x_test, rng: np.random.Generator):
        return None

    def aux_support(self, training, x_test) -> list:
        """Finite (aux, probability) pairs used for exact type I error."""
        return [(None, 1.0)]

    def partial_info(self, z: Dataset, aux):
        return BagOnly(to_bag(z))

    def engine_pvalue(self, z: Dataset, aux=None, alpha: float | None = None) -> PValueResult:
        u = self.partial_info(z, aux)
        if self.normalized:
            return engine.pvalue_exact(self.model, self.score, z, u, alpha)
        return engine.pvalue_unnormalized(self.model, self.score, z, u, alpha)

    def pvalue(self, z: Dataset, aux=None, alpha: float | None = None) -> PValueResult:
        return self.engine_pvalue(z, aux, alpha)

    def quantile_member(self, z: Dataset, aux, alpha: float) -> bool:
        raise NotImplementedError

    def permutation_weight(self, z: Dataset, aux, sigma: Permutation) -> float:
        raise NotImplementedError

    def oracle_score(self, z: Dataset, aux) -> OrderedScore:
        score = self.score
        return OrderedScore(lambda p, data: score(p, to_bag(data)), name=f"oracle({score.name})")

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


def _index_candidates(z: Dataset, weights, start: int = 0):
    return [(swap(z, i), float(weights[i - start])) for i in range(start, len(z))]


def _weighted_threshold_member(scores, weights, test: float, alpha: float, scale=None) -> bool:
    m = wdist.WeightedMeasure(scores, weights)
    return test <= wdist.threshold(m, alpha, scale)


def _permute_with_last(points: Sequence[DataPoint], last: int, rng) -> Dataset:
    rest = [p for i, p in enumerate(points) if i != last]
    order = rng.permutation(len(rest))
    return Dataset([rest[j] for j in order] + [points[last]])


# ------------------------------------------------------------ standard and split CP


class StandardCP(Method):
    def __init__(self, score: BagScore):
        if not isinstance(score, BagScore):
            raise ConfigurationError("standard_cp needs a BagScore")
        self.score = score
        self.name = "standard_cp"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, np.ones(len(z))),
            sampler=self._sample,
            log_mass=lambda c, u: 0.0,
            name="uniform permutations",
        )

    @staticmethod
    def _sample(u, rng):
        pts = u.bag.points
        order = rng.permutation(len(pts))
        return Dataset([pts[j] for j in order])

    def quantile_member(self, z, aux, alpha):
        s = score_vector(self.score, z)
        return _weighted_threshold_member(s, np.ones(len(s)), s[-1], alpha)

    def permutation_weight(self, z, aux, sigma):
        return 1.0


class SplitCP(Method):
    def __init__(self, score: SplitScore, n0: int):
        if not isinstance(score, SplitScore):
            raise ConfigurationError("split_cp needs a SplitScore")
        self.score = score
        self.n0 = int(n0)
        if self.n0 < 1:
            raise ConfigurationError("n0 must be at least 1")
        self.name = f"split_cp(n0={self.n0})"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, np.ones(len(z) - self.n0), start=self.n0),
            sampler=self._sample,
            log_mass=lambda c, u: 0.0,
            name="permutations after the prefix",
        )

    def _check(self, z: Dataset):
        if not 1 <= self.n0 <= z.n - 1:
            raise ConfigurationError(f"n0={self.n0} outside [1, {z.n - 1}]")

    def partial_info(self, z, aux):
        self._check(z)
        return BagWithPrefix(to_bag(z), z.head(self.n0))

    def _sample(self, u, rng):
        rest = list(u.bag.points)
        for p in u.prefix.points:
            rest.remove(p)
        order = rng.permutation(len(rest))
        return Dataset(list(u.prefix.points) + [rest[j] for j in order])

    def quantile_member(self, z, aux, alpha):
        self._check(z)
        prefix = z.head(self.n0)
        cal = self.score.batch(z.X[self.n0:-1], z.y[self.n0:-1], prefix)
        test = self.score(z.last, prefix)
        if wdist.inflate_rank(cal.size, alpha) > cal.size:
            return True  # inflated level above 1: the threshold is +inf, not the clipped maximum
        return test <= wdist.quantile_inflate(cal, alpha)

    def permutation_weight(self, z, aux, sigma):
        return 1.0 if tuple(sigma.mapping[: self.n0]) == tuple(range(self.n0)) else 0.0

    def oracle_score(self, z, aux):
        prefix = z.head(self.n0)
        return OrderedScore(lambda p, data: self.score(p, prefix), name="oracle(split)")


# ------------------------------------------------------------ weighted CP


class WCP(Method):
    def __init__(self, score: BagScore, w: Callable[[DataPoint], float]):
        if not isinstance(score, BagScore):
            raise ConfigurationError("wcp needs a BagScore")
        self.score = score
        self.w = w
        self.name = "wcp"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, self._weights(z)),
            sampler=self._sample,
            log_mass=lambda c, u: math.log(self.w(c.last)),
            name="weighted permutations",
        )

    def _weights(self, z: Dataset) -> np.ndarray:
        w = point_weights(self.w, z.X, z.y)
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise InvalidArgumentError("wcp weights must be finite and positive")
        return w

    def _sample(self, u, rng):
        pts = u.bag.points
        w = self._weights(u.bag)
        last = int(rng.choice(len(pts), p=w / w.sum()))
        return _permute_with_last(pts, last, rng)

    def quantile_member(self, z, aux, alpha):
        s = score_vector(self.score, z)
        return _weighted_threshold_member(s, self._weights(z), s[-1], alpha)

    def permutation_weight(self, z, aux, sigma):
        return float(self.w(z[sigma.last]))


class WCPUnnormalized(Method):
    normalized = False

    def __init__(self, score: BagScore, w: Callable[[DataPoint], float]):
        if not isinstance(score, BagScore):
            raise ConfigurationError("wcp_unnormalized needs a BagScore")
        self.score = score
        self.w = w
        self.name = "wcp_unnormalized"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, self._weights(z)),
            normalized=False,
            name="unnormalized weighted permutations",
        )

    def _weights(self, z: Dataset) -> np.ndarray:
        w = point_weights(self.w, z.X, z.y)
        if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
            raise InvalidArgumentError("weights must be finite and nonnegative")
        return w / len(z)

    def quantile_member(self, z, aux, alpha):
        w = self._weights(z)
        if not w.sum() > 0:
            return False
        s = score_vector(self.score, z)
        m = wdist.WeightedMeasure(s, w)
        return s[-1] <= wdist.threshold_unnormalized(m, alpha)

    def permutation_weight(self, z, aux, sigma):
        return float(self.w(z[sigma.last])) / math.factorial(len(z))


# ------------------------------------------------------------ NexCP


class NexCP(Method):
    """Swap-based model. ``pvalue`` returns the set-defining p*; ``engine_pvalue`` the unified p."""

    def __init__(self, score: OrderedScore, weights: NexWeights, rng: np.random.Generator | None = None):
        if not isinstance(score, OrderedScore):
            raise ConfigurationError("nexcp needs an OrderedScore")
        if not isinstance(weights, NexWeights):
            weights = NexWeights(weights)
        self.score = score
        self.weights = weights
        self.rng = rng
        self.name = "nexcp"
        self.model = ConditionalModel(
            enumerate=lambda z, u: [(swap(u.data, k), float(wk)) for k, wk in enumerate(self._w(z))],
            name="swap model",
        )

    def _w(self, z: Dataset) -> np.ndarray:
        if len(self.weights) != len(z):
            raise ConfigurationError(f"{len(self.weights)} weights for {len(z)} points")
        return self.weights.w

    def draw_aux(self, training, x_test, rng=None):
        rng = rng if rng is not None else (self.rng or np.random.default_rng())
        w = self.weights.w
        if len(w) != len(training) + 1:
            raise ConfigurationError(f"{len(w)} weights for {len(training) + 1} points")
        return int(rng.choice(len(w), p=w / w.sum()))

    def aux_support(self, training, x_test):
        return [(k, float(wk)) for k, wk in enumerate(self.weights.w) if wk > 0]

    def partial_info(self, z, aux):
        return SwappedData(swap(z, aux))

    def _star_measure(self, z: Dataset, K: int):
        zK = swap(z, K)
        s = np.array([self.score(p, zK) for p in z.points])
        return wdist.WeightedMeasure(s, self._w(z)), s[-1]

    def pvalue(self, z, aux=None, alpha=None):
        m, test = self._star_measure(z, aux)
        t = None if alpha is None else wdist.threshold(m, alpha)
        return PValueResult(wdist.tail_fraction(m, test), float(test), t, len(z))

    def quantile_member(self, z, aux, alpha):
        m, test = self._star_measure(z, aux)
        return test <= wdist.threshold(m, alpha)

    def permutation_weight(self, z, aux, sigma):
        size = len(z)
        tK = transposition(size, aux)
        total = 0.0
        for k, wk in enumerate(self._w(z)):
            if sigma == tK.compose(transposition(size, k)):
                total += wk
        return total

    def oracle_score(self, z, aux):
        zK = swap(z, aux)
        return OrderedScore(lambda p, data: self.score(p, zK), name="oracle(nexcp)")


# ------------------------------------------------------------ localized CP


class RLCP(Method):
    def __init__(self, score: BagScore, kernel: KernelSpec, rng: np.random.Generator | None = None,
                 quadrature_nodes: int = 64):
        if not isinstance(score, BagScore):
            raise ConfigurationError("rlcp needs a BagScore")
        self.score = score
        self.kernel = kernel
        self.rng = rng
        self.quadrature_nodes = quadrature_nodes
        self.name = "rlcp"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, self._weights(z.X, u.anchor)),
            sampler=self._sample,
            log_mass=lambda c, u: float(self.kernel.log_h(c.X[-1:], u.anchor)[0]),
            name="anchor-localized permutations",
        )

    def _weights(self, X, anchor) -> np.ndarray:
        w = np.exp(self.kernel.log_h(X, anchor))
        if not w.sum() > 0:
            raise ModelError("all kernel weights vanished")
        return w

    def _sample(self, u, rng):
        w = self._weights(u.bag.X, u.anchor)
        last = int(rng.choice(len(w), p=w / w.sum()))
        return _permute_with_last(u.bag.points, last, rng)

    def draw_aux(self, training, x_test, rng=None):
        rng = rng if rng is not None else (self.rng or np.random.default_rng())
        return self.kernel.sample(x_test, rng)

    def aux_support(self, training, x_test):
        return self.kernel.quadrature(x_test, self.quadrature_nodes)

    def partial_info(self, z, aux):
        return BagWithAnchor(to_bag(z), tuple(float(a) for a in aux))

    def quantile_member(self, z, aux, alpha):
        s = score_vector(self.score, z)
        w = self._weights(z.X, aux)
        if not w[-1] > 0:
            raise ModelError("test point has zero kernel weight at its own anchor")
        return _weighted_threshold_member(s, w, s[-1], alpha)

    def permutation_weight(self, z, aux, sigma):
        return float(np.exp(self.kernel.log_h(z.X[[sigma.last]], aux)[0]))


class RLCPResample(Method):
    def __init__(self, score: BagScore, kernel: KernelSpec, rng: np.random.Generator | None = None):
        if not isinstance(score, BagScore):
            raise ConfigurationError("rlcp_resample needs a BagScore")
        self.score = score
        self.kernel = kernel
        self.rng = rng
        self.name = "rlcp_resample"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, self._weights(z.X, u.anchor)),
            sampler=self._sample,
            log_mass=lambda c, u: float(np.log(self._weights(c.X, u.anchor)[-1])),
            name="resampled-anchor permutations",
        )

    def _weights(self, X, anchor) -> np.ndarray:
        # column of the row-normalized kernel matrix at the anchor feature
        logH = np.vstack([self.kernel.log_h(X, X[i]) for i in range(len(X))])
        log_rows = logsumexp(logH, axis=1)
        return np.exp(self.kernel.log_h(X, anchor) - log_rows)

    def _sample(self, u, rng):
        w = self._weights(u.bag.X, u.anchor)
        last = int(rng.choice(len(w), p=w / w.sum()))
        return _permute_with_last(u.bag.points, last, rng)

    def _test_row(self, training, x_test) -> np.ndarray:
        X = np.vstack([np.array([p.x for p in training]), np.atleast_2d(np.asarray(x_test, dtype=float))])
        return kernel_matrix(self.kernel, X)[-1]

    def draw_aux(self, training, x_test, rng=None):
        rng = rng if rng is not None else (self.rng or np.random.default_rng())
        row = self._test_row(training, x_test)
        return int(rng.choice(row.size, p=row / row.sum()))

    def aux_support(self, training, x_test):
        return [(k, float(v)) for k, v in enumerate(self._test_row(training, x_test)) if v > 0]

    def partial_info(self, z, aux):
        return BagWithIndexAnchor(to_bag(z), tuple(float(a) for a in z.X[aux]))

    def quantile_member(self, z, aux, alpha):
        s = score_vector(self.score, z)
        return _weighted_threshold_member(s, self._weights(z.X, z.X[aux]), s[-1], alpha)

    def permutation_weight(self, z, aux, sigma):
        return float(self._weights(z.X, z.X[aux])[sigma.last])


# ------------------------------------------------------------ generalized WCP


class GWCP(Method):
    def __init__(self, score: BagScore, lr: LikelihoodRatio, max_n: int = 8):
        if not isinstance(score, BagScore):
            raise ConfigurationError("gwcp needs a BagScore; use gwcp_nonsym for ordered scores")
        self.score = score
        self.lr = lr
        self.max_n = int(max_n)
        self.name = "gwcp"
        self.model = ConditionalModel(
            enumerate=lambda z, u: _index_candidates(z, self.index_weights(z)),
            sampler=self._sample,
            log_mass=self._log_mass,
            name="likelihood-ratio permutations",
        )

    def _perms(self, z: Dataset) -> np.ndarray:
        if len(z) > self.max_n:
            raise CapacityError(f"{len(z)} points exceed max_n={self.max_n}; use gwcp_is")
        return _all_perm_array(len(z))

    def _log_weights(self, z: Dataset):
        perms = self._perms(z)
        _check_identity(self.lr, z)
        lw = self.lr.batch(z, perms)
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise InvalidArgumentError("likelihood ratio produced NaN or +inf")
        return perms, lw

    def index_weights(self, z: Dataset) -> np.ndarray:
        """W_i = sum over σ with σ(last) = i of f(z_σ)/f(z), up to a common factor."""
        perms, lw = self._log_weights(z)
        top = lw.max()
        contrib = np.exp(lw - top)
        W = np.zeros(len(z))
        np.add.at(W, perms[:, -1], contrib)
        return W

    def _sample(self, u, rng):
        ref = u.bag.as_dataset()
        perms, lw = self._log_weights(ref)
        prob = np.exp(lw - logsumexp(lw))
        return apply_perm(ref, perms[int(rng.choice(len(prob), p=prob))])

    def _log_mass(self, c, u):
        ref = u.bag.as_dataset()
        return self.lr(ref, perm_between(ref, c))

    def quantile_member(self, z, aux, alpha):
        s = score_vector(self.score, z)
        return _weighted_threshold_member(s, self.index_weights(z), s[-1], alpha)

    def permutation_weight(self, z, aux, sigma):
        return float(np.exp(self.lr(z, sigma)))


class GWCPNonsym(GWCP):
    """Full (n+1)!-atom model with an order-dependent score."""

    def __init__(self, score: OrderedScore, lr: LikelihoodRatio, max_n: int = 7):
        if not isinstance(score, OrderedScore):
            raise ConfigurationError("gwcp_nonsym needs an OrderedScore")
        self.score = score
        self.lr = lr
        self.max_n = int(max_n)
        self.name = "gwcp_nonsym"
        self.model = ConditionalModel(
            enumerate=self._enumerate,
            sampler=self._sample,
            log_mass=self._log_mass,
            name="likelihood-ratio permutations (full)",
        )

    def _enumerate(self, z, u):
        perms, lw = self._log_weights(z)
        w = np.exp(lw - lw.max())
        return [(apply_perm(z, p), float(wi)) for p, wi in zip(perms, w)]

    def _measure(self, z):
        perms, lw = self._log_weights(z)
        s = self.score.permuted_last_scores(z, perms)
        ident = np.flatnonzero(np.all(perms == np.arange(len(z)), axis=1))[0]
        return wdist.WeightedMeasure(s, np.exp(lw - lw.max())), s[ident]

    def quantile_member(self, z, aux, alpha):
        m, test = self._measure(z)
        return test <= wdist.threshold(m, alpha)

    def oracle_score(self, z, aux):
        return self.score


class GWCPImportance(Method):
    """Importance-sampled version of the full likelihood-ratio model.

    The sampled permutations are the auxiliary randomness: they depend on the
    features only, so one draw serves a whole prediction set.
    """

    def __init__(self, score: OrderedScore, feature_lr: LikelihoodRatio, proposal_lr: LikelihoodRatio | None = None,
                 M: int = 1000, rng: np.random.Generator | None = None, max_exact_n: int = 7):
        if not isinstance(score, OrderedScore):
            raise ConfigurationError("gwcp_is needs an OrderedScore")
        if int(M) < 1:
            raise ConfigurationError("M must be at least 1")
        self.score = score
        self.lr = feature_lr
        self.proposal_lr = proposal_lr
        self.M = int(M)
        self.rng = rng
        self.max_exact_n = int(max_exact_n)
        self.name = f"gwcp_is(M={self.M})"

    def draw_aux(self, training, x_test, rng=None):
        rng = rng if rng is not None else (self.rng or np.random.default_rng())
        size = len(training) + 1
        if self.proposal_lr is None:
            return rng.permuted(np.tile(np.arange(size), (self.M, 1)), axis=1)
        if size > self.max_exact_n:
            raise CapacityError(f"non-uniform proposal needs n+1 <= {self.max_exact_n}")
        # the proposal only reads features, so any response will do here
        z = Dataset(list(training) + [DataPoint(x_test, 0.0)])
        perms = _all_perm_array(size)
        lg = self.proposal_lr.batch(z, perms)
        prob = np.exp(lg - logsumexp(lg))
        return perms[rng.choice(len(perms), size=self.M, p=prob)]

    def aux_support(self, training, x_test):
        raise CapacityError("importance-sampled p-values have no finite auxiliary support")

    def _measure(self, z: Dataset, perms: np.ndarray):
        size = len(z)
        perms = np.vstack([np.arange(size)[None, :], np.asarray(perms, dtype=int)])
        log_w = self.lr.batch(z, perms)
        if self.proposal_lr is not None:
            log_g = self.proposal_lr.batch(z, perms)
            if np.any(np.isneginf(log_g)) or np.any(np.isnan(log_g)):
                raise AbsoluteContinuityError("proposal has zero density at a sampled permutation")
            log_w = log_w - log_g
        log_w = log_w - log_w[0]
        if np.any(np.isnan(log_w)) or np.any(log_w == np.inf):
            raise AbsoluteContinuityError("target/proposal ratio is undefined at a sampled permutation")
        s = self.score.permuted_last_scores(z, perms)
        return wdist.WeightedMeasure(s, np.exp(log_w - log_w.max())), s[0]

    def pvalue(self, z, aux=None, alpha=None):
        if aux is None:
            aux = self.draw_aux(z.points[:-1], z.last.x, None)
        m, test = self._measure(z, aux)
        t = None if alpha is None else wdist.threshold(m, alpha)
        return PValueResult(wdist.tail_fraction(m, test), float(test), t, self.M)

    engine_pvalue = pvalue

    def quantile_member(self, z, aux, alpha):
        m, test = self._measure(z, aux)
        return test <= wdist.threshold(m, alpha)


# ------------------------------------------------------------ sampled p-values on any model


class MonteCarlo(Method):
    """p-value from M exact draws of another method's model; aux is a stream seed."""

    def __init__(self, base: Method, M: int):
        if base.model.sampler is None:
            raise ConfigurationError(f"{base.name} has no sampler")
        self.base = base
        self.M = int(M)
        self.score = base.score
        self.name = f"mc({base.name},M={self.M})"

    def draw_aux(self, training, x_test, rng):
        return (self.base.draw_aux(training, x_test, rng), int(rng.integers(2**63)))

    def pvalue(self, z, aux=None, alpha=None):
        base_aux, seed = aux
        u = self.base.partial_info(z, base_aux)
        return engine.pvalue_mc(self.base.model, self.score, z, u, self.M, np.random.default_rng(seed), alpha)

    engine_pvalue = pvalue

    def quantile_member(self, z, aux, alpha):
        res = self.pvalue(z, aux, alpha)
        return res.test_score <= res.threshold


class ImportanceSampled(Method):
    """Self-normalized importance-sampling p-value: target model, draws from a proposal model."""

    def __init__(self, target: Method, proposal: Method, M: int):
        if proposal.model.sampler is None:
            raise ConfigurationError(f"{proposal.name} has no sampler")
        self.target = target
        self.proposal = proposal
        self.M = int(M)
        self.score = target.score
        self.name = f"is({target.name}|{proposal.name},M={self.M})"

    def draw_aux(self, training, x_test, rng):
        return (self.target.draw_aux(training, x_test, rng), int(rng.integers(2**63)))

    def pvalue(self, z, aux=None, alpha=None):
        base_aux, seed = aux
        u = self.target.partial_info(z, base_aux)
        return engine.pvalue_is(self.target.model, self.proposal.model, self.score, z, u, self.M,
                                np.random.default_rng(seed), alpha)

    engine_pvalue = pvalue

    def quantile_member(self, z, aux, alpha):
        res = self.pvalue(z, aux, alpha)
        return res.test_score <= res.threshold


# ------------------------------------------------------------ constructors


def standard_cp(score: BagScore) -> StandardCP:
    return StandardCP(score)


def split_cp(score: SplitScore, n0: int) -> SplitCP:
    return SplitCP(score, n0)


def wcp(score: BagScore, w: Callable[[DataPoint], float]) -> WCP:
    return WCP(score, w)


def wcp_unnormalized(score: BagScore, w: Callable[[DataPoint], float]) -> WCPUnnormalized:
    return WCPUnnormalized(score, w)


def nexcp(score: OrderedScore, weights: NexWeights | Sequence[float], rng: np.random.Generator | None = None) -> NexCP:
    return NexCP(score, weights, rng)


def rlcp(score: BagScore, kernel: KernelSpec, rng: np.random.Generator | None = None) -> RLCP:
    return RLCP(score, kernel, rng)


def rlcp_resample(score: BagScore, kernel: KernelSpec, rng: np.random.Generator | None = None) -> RLCPResample:
    return RLCPResample(score, kernel, rng)


def gwcp(score: BagScore, lr: LikelihoodRatio, max_n: int = 8) -> GWCP:
    return GWCP(score, lr, max_n)


def gwcp_nonsym(score: OrderedScore, lr: LikelihoodRatio, max_n: int = 7) -> GWCPNonsym:
    return GWCPNonsym(score, lr, max_n)


def gwcp_is(score: OrderedScore, feature_lr: LikelihoodRatio, proposal_lr: LikelihoodRatio | None = None,
            M: int = 1000, rng: np.random.Generator | None = None, max_exact_n: int = 7) -> GWCPImportance:
    return GWCPImportance(score, feature_lr, proposal_lr, M, rng, max_exact_n)
