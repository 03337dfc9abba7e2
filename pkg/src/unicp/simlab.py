"""Seeded data generators, coverage estimation and plug-in robustness terms.

Each trial draws from its own stream ``default_rng(SeedSequence([seed, trial]))``
so results do not depend on how trials are split across workers.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from .core import DataPoint, Dataset, augment
from .errors import CapacityError, DiagnosticError, InvalidArgumentError
from .methods import LikelihoodRatio, PointWeight, point_weights

LOG_2PI = math.log(2 * math.pi)


def _vec(v, d: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(v, dtype=float), (d,)).copy()
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} must be finite")
    return arr


def _log_normal(X: np.ndarray, mean) -> np.ndarray:
    """Log density of N(mean, I) at each row of X."""
    X = np.atleast_2d(X)
    return -0.5 * np.sum((X - mean) ** 2, axis=-1) - 0.5 * X.shape[-1] * LOG_2PI


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


# ------------------------------------------------------------ generator specs


@dataclass(frozen=True)
class _Base:
    n: int
    d: int = 1
    beta: tuple[float, ...] | float = 1.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if int(self.n) < 1 or int(self.d) < 1:
            raise InvalidArgumentError("n and d must be positive")
        if not self.noise_sd > 0:
            raise InvalidArgumentError("noise_sd must be positive")

    @property
    def coef(self) -> np.ndarray:
        return _vec(self.beta, self.d, "beta")

    def _responses(self, X: np.ndarray, rng) -> np.ndarray:
        return X @ self.coef + self.noise_sd * rng.standard_normal(X.shape[0])

    def permutation_lr(self) -> LikelihoodRatio:
        return LikelihoodRatio.exchangeable()


@dataclass(frozen=True)
class Exchangeable(_Base):
    """X ~ N(0, I_d), Y = X'beta + noise, for all n+1 points."""

    def features(self, rng) -> np.ndarray:
        return rng.standard_normal((self.n + 1, self.d))


@dataclass(frozen=True)
class CovariateShift(_Base):
    """Training X ~ N(train_mean, I), test X ~ N(test_mean, I); Y | X unchanged."""

    train_mean: tuple[float, ...] | float = 0.0
    test_mean: tuple[float, ...] | float = 1.0

    def features(self, rng) -> np.ndarray:
        X = rng.standard_normal((self.n + 1, self.d))
        X[:-1] += _vec(self.train_mean, self.d, "train_mean")
        X[-1] += _vec(self.test_mean, self.d, "test_mean")
        return X

    def log_wstar(self, X) -> np.ndarray:
        """log of test density over training density of the features."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mt = _vec(self.train_mean, self.d, "train_mean")
        me = _vec(self.test_mean, self.d, "test_mean")
        return X @ (me - mt) + 0.5 * (mt @ mt - me @ me)

    @property
    def wstar(self) -> PointWeight:
        """w*(point): test over training feature density."""
        return PointWeight(self.log_wstar, name="wstar")

    def train_log_density(self, X) -> np.ndarray:
        return _log_normal(np.atleast_2d(np.asarray(X, dtype=float)), _vec(self.train_mean, self.d, "train_mean"))

    def test_log_density(self, X) -> np.ndarray:
        return _log_normal(np.atleast_2d(np.asarray(X, dtype=float)), _vec(self.test_mean, self.d, "test_mean"))

    def sample_train(self, rng, size: int) -> np.ndarray:
        return rng.standard_normal((size, self.d)) + _vec(self.train_mean, self.d, "train_mean")

    def permutation_lr(self) -> LikelihoodRatio:
        # f(z) = prod_{i<=n} p_tr(x_i) * p_te(x_{n+1}); only the last slot differs
        def batch(z, perms):
            lw = self.log_wstar(z.X)
            return lw[perms[:, -1]] - lw[-1]
        return LikelihoodRatio(batch=batch, name="covariate_shift")


@dataclass(frozen=True)
class Drift(_Base):
    """Training X_i ~ N(m_i, I) independently, test X ~ N(test_mean, I)."""

    per_index_means: tuple = ()
    test_mean: tuple[float, ...] | float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if len(self.per_index_means) != self.n:
            raise InvalidArgumentError(f"need {self.n} per-index means, got {len(self.per_index_means)}")

    @cached_property
    def _mean_matrix(self) -> np.ndarray:
        return np.vstack([_vec(m, self.d, "per_index_means") for m in self.per_index_means])

    def _means(self) -> np.ndarray:
        return self._mean_matrix

    def features(self, rng) -> np.ndarray:
        X = rng.standard_normal((self.n + 1, self.d))
        X[:-1] += self._means()
        X[-1] += _vec(self.test_mean, self.d, "test_mean")
        return X

    def test_log_density(self, X) -> np.ndarray:
        return _log_normal(np.atleast_2d(np.asarray(X, dtype=float)), _vec(self.test_mean, self.d, "test_mean"))

    def index_log_density(self, i: int, X) -> np.ndarray:
        return _log_normal(np.atleast_2d(np.asarray(X, dtype=float)), self._means()[i])

    def log_wstar_i(self, i: int, X) -> np.ndarray:
        return self.test_log_density(X) - self.index_log_density(i, X)

    def mixture_log_density(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        logs = _log_normal(X[None, :, :], self._means()[:, None, :])
        return logsumexp(logs, axis=0) - math.log(self.n)

    @property
    def mixture_weight(self) -> PointWeight:
        """Test density over the training mixture density."""
        return PointWeight(lambda X: self.test_log_density(X) - self.mixture_log_density(X), name="mixture_weight")

    def sample_mixture(self, rng, size: int) -> np.ndarray:
        idx = rng.integers(0, self.n, size=size)
        return self._means()[idx] + rng.standard_normal((size, self.d))

    def permutation_lr(self) -> LikelihoodRatio:
        def log_f(z):
            total = float(self.test_log_density(z.X[-1])[0])
            for i in range(self.n):
                total += float(self.index_log_density(i, z.X[i])[0])
            return total
        return LikelihoodRatio.from_log_density(log_f, name="drift")


FCS_RULES = ("best_response",)


@dataclass(frozen=True)
class FCS(_Base):
    """Sequential design: X_1 ~ N(init_mean, I), then X_t ~ N(feature of the best response so far, I).

    The test point is the (n+1)-th point of the same sequence.
    """

    acquisition: str = "best_response"
    init_mean: tuple[float, ...] | float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if self.acquisition not in FCS_RULES:
            raise InvalidArgumentError(f"unknown acquisition rule {self.acquisition!r}; known: {FCS_RULES}")

    def sample(self, rng):
        m = self.n + 1
        X = np.empty((m, self.d))
        y = np.empty(m)
        center = _vec(self.init_mean, self.d, "init_mean")
        best = None
        coef = self.coef
        for t in range(m):
            X[t] = center + rng.standard_normal(self.d)
            y[t] = X[t] @ coef + self.noise_sd * rng.standard_normal()
            if best is None or y[t] > y[best]:
                best = t
            center = X[best]
        return X, y

    def log_fx(self, z: Dataset) -> float:
        """log of the product of acquisition densities along the order of z."""
        return float(self._log_fx_batch(z.X[None], z.y[None])[0])

    def _log_fx_batch(self, Xp: np.ndarray, yp: np.ndarray) -> np.ndarray:
        M, m, _ = Xp.shape
        rows = np.arange(M)
        total = _log_normal(Xp[:, 0, :], _vec(self.init_mean, self.d, "init_mean"))
        best = np.zeros(M, dtype=int)
        for t in range(1, m):
            total = total + _log_normal(Xp[:, t, :] - Xp[rows, best, :], 0.0)
            better = yp[:, t] > yp[rows, best]
            best = np.where(better, t, best)
        return total

    def permutation_lr(self) -> LikelihoodRatio:
        def batch(z, perms):
            lf = self._log_fx_batch(z.X[perms], z.y[perms])
            return lf - self.log_fx(z)
        return LikelihoodRatio(batch=batch, name="fcs")


GeneratorSpec = Exchangeable | CovariateShift | Drift | FCS


class Draw(NamedTuple):
    training: tuple[DataPoint, ...]
    test: DataPoint
    side_info: dict


def generate(spec: GeneratorSpec, rng: np.random.Generator) -> Draw:
    """One draw of (training points, test point, exact side information)."""
    if isinstance(spec, FCS):
        X, y = spec.sample(rng)
    else:
        X = spec.features(rng)
        y = spec._responses(X, rng)
    pts = tuple(DataPoint(X[i], y[i]) for i in range(len(y)))
    side = {"permutation_lr": spec.permutation_lr()}
    if isinstance(spec, CovariateShift):
        side["log_wstar"] = spec.log_wstar
    elif isinstance(spec, Drift):
        side["log_wstar_i"] = spec.log_wstar_i
        side["mixture_log_density"] = spec.mixture_log_density
    elif isinstance(spec, FCS):
        side["log_fx"] = spec.log_fx
    return Draw(pts[:-1], pts[-1], side)


# ------------------------------------------------------------ coverage


@dataclass(frozen=True)
class CoverageReport:
    trials: int
    covered: int
    coverage: float
    wilson_ci: tuple[float, float]
    alpha: float
    theoretical_floor: float
    inflation_estimate: float | None
    seed: int
    method: str = ""

    @property
    def se(self) -> float:
        return binomial_se(self.coverage, self.trials)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def binomial_se(rate: float, trials: int) -> float:
    return math.sqrt(max(rate * (1 - rate), 0.0) / trials)


def wilson_interval(k: int, n: int) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=0.95, method="wilson")
    return (float(ci.low), float(ci.high))


def _trial_pvalue(method, spec, seed: int, trial: int) -> float:
    rng = trial_rng(seed, trial)
    draw = generate(spec, rng)
    aux = method.draw_aux(draw.training, draw.test.x, rng)
    z = augment(draw.training, draw.test.x, draw.test.y)
    return float(method.pvalue(z, aux).p)


def _trial_record(method, spec, seed: int, trial: int) -> tuple[float, tuple[float, ...]]:
    rng = trial_rng(seed, trial)
    draw = generate(spec, rng)
    aux = method.draw_aux(draw.training, draw.test.x, rng)
    z = augment(draw.training, draw.test.x, draw.test.y)
    return float(method.pvalue(z, aux).p), draw.test.x


def simulate_pvalues(method, spec: GeneratorSpec, trials: int, seed: int, workers: int = 1) -> np.ndarray:
    """p-value at the true response for trials 0..trials-1, in trial order."""
    idx = range(int(trials))
    if workers <= 1:
        return np.array([_trial_pvalue(method, spec, seed, t) for t in idx])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(lambda t: _trial_pvalue(method, spec, seed, t), idx)))


def coverage_from_pvalues(p: np.ndarray, alpha: float, seed: int, floor: float | None = None,
                          inflation: float | None = None, method: str = "") -> CoverageReport:
    trials = int(p.size)
    covered = int(np.sum(p > alpha))
    return CoverageReport(
        trials=trials,
        covered=covered,
        coverage=covered / trials,
        wilson_ci=wilson_interval(covered, trials),
        alpha=float(alpha),
        theoretical_floor=float(1 - alpha if floor is None else floor),
        inflation_estimate=inflation,
        seed=int(seed),
        method=method,
    )


def estimate_coverage(method, spec: GeneratorSpec, alpha: float, trials: int = 2000, seed: int = 0,
                      floor: float | None = None, inflation: float | None = None, workers: int = 1) -> CoverageReport:
    """Fraction of trials with p(Y_true) > alpha, plus a 95% Wilson interval.

    ``floor`` defaults to 1 - alpha; pass ``1 - alpha - inflation`` for
    misspecified settings.
    """
    if int(trials) < 100:
        raise InvalidArgumentError("use at least 100 trials")
    p = simulate_pvalues(method, spec, trials, seed, workers)
    return coverage_from_pvalues(p, alpha, seed, floor, inflation, getattr(method, "name", ""))


class CurvePoint(NamedTuple):
    alpha: float
    rate: float
    se: float


def superuniformity_curve(method, spec: GeneratorSpec, alpha_grid: Sequence[float], trials: int = 2000,
                          seed: int = 0, workers: int = 1) -> list[CurvePoint]:
    """Empirical P(p <= alpha) on a grid of levels."""
    grid = [float(a) for a in alpha_grid]
    if any(not 0 < a < 1 for a in grid):
        raise InvalidArgumentError("alpha grid must lie in (0, 1)")
    p = simulate_pvalues(method, spec, trials, seed, workers)
    out = []
    for a in grid:
        rate = float(np.mean(p <= a))
        out.append(CurvePoint(a, rate, binomial_se(rate, p.size)))
    return out


def conditional_coverage(method, spec: GeneratorSpec, alpha: float, interval: tuple[float, float],
                         trials: int = 2000, seed: int = 0) -> CoverageReport | None:
    """Coverage restricted to trials whose 1-d test feature falls in `interval` (descriptive only)."""
    lo, hi = interval
    covered = kept = 0
    for t in range(int(trials)):
        p, x = _trial_record(method, spec, seed, t)
        if lo <= x[0] <= hi:
            kept += 1
            covered += p > alpha
    if kept == 0:
        return None
    return CoverageReport(kept, covered, covered / kept, wilson_interval(covered, kept), float(alpha),
                          float("nan"), None, int(seed), getattr(method, "name", ""))


# ------------------------------------------------------------ robustness terms


class Estimate(NamedTuple):
    value: float
    se: float

    def __float__(self):
        return self.value


def _weights_at(w: Callable[[DataPoint], float], X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return point_weights(w, X, y)


def _check_normalizer(wv: np.ndarray):
    if not np.all(np.isfinite(wv)) or np.any(wv < 0):
        raise DiagnosticError("weights are not finite and nonnegative")
    half = wv.size // 2
    a, b = wv[:half].mean(), wv[half:].mean()
    if not (a > 0 and b > 0) or abs(a - b) > 0.5 * max(a, b):
        raise DiagnosticError(f"unstable normalization estimate: half-sample means {a:.4g} and {b:.4g}")


def estimate_l1_inflation(spec: CovariateShift, w: Callable[[DataPoint], float], samples: int = 100_000,
                          seed: int = 0) -> Estimate:
    """Monte Carlo estimate of 0.5 * E_train |w/E_train[w] - w*|."""
    if not isinstance(spec, CovariateShift):
        raise InvalidArgumentError("l1 inflation needs a CovariateShift spec")
    rng = np.random.default_rng(seed)
    X = spec.sample_train(rng, samples)
    y = spec._responses(X, rng)
    wv = _weights_at(w, X, y)
    _check_normalizer(wv)
    norm = wv.mean()
    diff = wv / norm - np.exp(spec.log_wstar(X))
    integrand = 0.5 * np.abs(diff)
    # delta method: the normalizer is itself a sample mean
    slope = -0.5 * np.mean(np.sign(diff) * wv) / norm**2
    influence = integrand + slope * wv
    return Estimate(float(integrand.mean()), float(influence.std(ddof=1) / math.sqrt(samples)))


def estimate_positive_gap(spec: CovariateShift, w: Callable[[DataPoint], float], samples: int = 100_000,
                          seed: int = 0) -> Estimate:
    """Monte Carlo estimate of E_train (w* - w)_+ (no normalization of w)."""
    rng = np.random.default_rng(seed)
    X = spec.sample_train(rng, samples)
    y = spec._responses(X, rng)
    gap = np.maximum(np.exp(spec.log_wstar(X)) - _weights_at(w, X, y), 0.0)
    return Estimate(float(gap.mean()), float(gap.std(ddof=1) / math.sqrt(samples)))


def gaussian_tv(a: float, b: float) -> float:
    """Total variation between N(a, 1) and N(b, 1)."""
    return float(2 * stats.norm.cdf(abs(a - b) / 2) - 1)


def tv_to_mixture(spec: Drift, i: int) -> float:
    """d_TV(F_i, mixture of all F_j) by adaptive quadrature (1-d)."""
    means = spec._means()[:, 0]
    lo, hi = means.min() - 12, means.max() + 12

    def f(x):
        xi = np.array([[x]])
        return abs(math.exp(spec.index_log_density(i, xi)[0]) - math.exp(spec.mixture_log_density(xi)[0]))

    val, _ = integrate.quad(f, lo, hi, points=sorted(set(means.tolist())), limit=200)
    return 0.5 * val


@dataclass(frozen=True)
class DriftBound:
    positive_parts: tuple[float, ...]
    tv_terms: tuple[float, ...]
    total: float
    se: float = 0.0


def drift_bound_terms(spec: Drift, w: Callable[[DataPoint], float], samples: int = 20_000, seed: int = 0) -> DriftBound:
    """Per-index terms E_{F_i}(w*_i - w/E_mix[w])_+ and d_TV(F_i, mixture), and their average sum."""
    if spec.d != 1:
        raise CapacityError("drift bound terms are implemented for 1-d features only")
    rng = np.random.default_rng(seed)
    Xm = spec.sample_mixture(rng, samples)
    ym = spec._responses(Xm, rng)
    wm = _weights_at(w, Xm, ym)
    _check_normalizer(wm)
    norm = wm.mean()
    pos, tvs, var = [], [], 0.0
    for i in range(spec.n):
        Xi = spec._means()[i] + rng.standard_normal((samples, 1))
        yi = spec._responses(Xi, rng)
        g = np.maximum(np.exp(spec.log_wstar_i(i, Xi)) - _weights_at(w, Xi, yi) / norm, 0.0)
        pos.append(float(g.mean()))
        var += g.var(ddof=1) / samples
        tvs.append(tv_to_mixture(spec, i))
    total = (sum(pos) + sum(tvs)) / spec.n
    return DriftBound(tuple(pos), tuple(tvs), float(total), float(math.sqrt(var) / spec.n))
