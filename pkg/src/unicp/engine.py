"""Conditional-model p-values: exact, unnormalized, Monte Carlo and importance sampled.

A conformal method is described by partial information ``u`` about the
ordered data ``z`` (always revealing its bag) and a model ``Q(.|u)`` over
reorderings of ``z``. The p-value is the Q-mass of reorderings whose score
is at least the observed one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np

from . import wdist
from .core import Bag, BagScore, Dataset, OrderedScore, SplitScore, augment, to_bag
from .errors import AbsoluteContinuityError, ConfigurationError, InvalidArgumentError, ModelError

# ------------------------------------------------------------ partial information


@dataclass(frozen=True)
class BagOnly:
    bag: Bag


@dataclass(frozen=True)
class BagWithPrefix:
    bag: Bag
    prefix: Dataset


@dataclass(frozen=True)
class BagWithAnchor:
    bag: Bag
    anchor: tuple[float, ...]


@dataclass(frozen=True)
class SwappedData:
    data: Dataset

    @property
    def bag(self) -> Bag:
        return to_bag(self.data)


@dataclass(frozen=True)
class BagWithIndexAnchor:
    bag: Bag
    anchor: tuple[float, ...]


PartialInfo = BagOnly | BagWithPrefix | BagWithAnchor | SwappedData | BagWithIndexAnchor


def h(u: PartialInfo) -> Bag:
    """The bag carried by any partial-information record."""
    return u.bag


# ------------------------------------------------------------ models and results

Atoms = Sequence[tuple[Dataset, float]]


@dataclass(frozen=True)
class ConditionalModel:
    """Q(. | u) over reorderings of the observed data.

    Attributes
    ----------
    enumerate : callable
        (observed, u) -> [(candidate dataset, weight), ...].
    sampler : callable, optional
        (u, rng) -> candidate dataset drawn from the normalized model.
    normalized : bool
        True when Q is a probability law. Weights then only need to be
        proportional; p-values divide by their total.
    log_mass : callable, optional
        (candidate, u) -> log of the unnormalized mass of one reordering,
        needed when the model is a target or proposal for importance sampling.
    name : str
    """

    enumerate: Callable[[Dataset, Any], Atoms]
    sampler: Callable[[Any, np.random.Generator], Dataset] | None = None
    normalized: bool = True
    log_mass: Callable[[Dataset, Any], float] | None = None
    name: str = "model"


class PValueResult(NamedTuple):
    p: float
    test_score: float
    threshold: Any  # float or wdist.NEG_INF; None when alpha was not given
    n_candidates_or_samples: int

    def member(self, alpha: float) -> bool:
        return self.p > alpha


# ------------------------------------------------------------ scoring


def unified_score(score, candidate: Dataset, u: PartialInfo) -> float:
    """s(candidate, u), dispatched on the score and partial-information types."""
    last = candidate.last
    if isinstance(score, BagScore):
        return score(last, u.bag)
    if isinstance(score, SplitScore):
        if not isinstance(u, BagWithPrefix):
            raise ConfigurationError("a split score needs BagWithPrefix partial information")
        return score(last, u.prefix)
    if isinstance(score, OrderedScore):
        if isinstance(u, SwappedData):
            return score(last, u.data)
        return score(last, candidate)
    raise ConfigurationError(f"unsupported score type {type(score).__name__}")


def _scores(score, candidates: Sequence[Dataset], u: PartialInfo) -> np.ndarray:
    # every candidate shares the bag (or prefix) so vectorize the fit
    if isinstance(score, (BagScore, SplitScore)):
        ref = u.bag if isinstance(score, BagScore) else getattr(u, "prefix", None)
        if ref is None:
            raise ConfigurationError("a split score needs BagWithPrefix partial information")
        X = np.array([c.X[-1] for c in candidates])
        y = np.array([c.y[-1] for c in candidates])
        return np.asarray(score.batch(X, y, ref), dtype=float)
    return np.array([unified_score(score, c, u) for c in candidates])


def _enumerate_checked(model: ConditionalModel, z: Dataset, u: PartialInfo):
    atoms = list(model.enumerate(z, u))
    if not atoms:
        raise ModelError(f"{model.name}: empty support")
    bag = h(u)
    candidates, weights = [], []
    for cand, w in atoms:
        if to_bag(cand) != bag:
            raise ModelError(f"{model.name}: candidate outside the support h(u)")
        w = float(w)
        if not w >= 0:
            raise ModelError(f"{model.name}: negative or NaN weight {w}")
        candidates.append(cand)
        weights.append(w)
    return candidates, np.array(weights)


def _result(values, weights, test_score, alpha, scale, count) -> PValueResult:
    m = wdist.WeightedMeasure(values, weights)
    p = wdist.tail_fraction(m, test_score, scale)
    t = None if alpha is None else wdist.threshold(m, alpha, scale)
    return PValueResult(p, float(test_score), t, count)


def pvalue_exact(model: ConditionalModel, score, z: Dataset, u: PartialInfo, alpha: float | None = None) -> PValueResult:
    """Weighted tail fraction of candidate scores at the observed score."""
    if not model.normalized:
        raise ModelError("pvalue_exact needs a normalized model; use pvalue_unnormalized")
    candidates, weights = _enumerate_checked(model, z, u)
    if not weights.sum() > 0:
        raise ModelError(f"{model.name}: zero total weight")
    values = _scores(score, candidates, u)
    test = unified_score(score, z, u)
    return _result(values, weights, test, alpha, None, len(candidates))


def pvalue_unnormalized(model: ConditionalModel, score, z: Dataset, u: PartialInfo, alpha: float | None = None) -> PValueResult:
    """Raw tail mass (may exceed 1); threshold is the generalized one."""
    candidates, weights = _enumerate_checked(model, z, u)
    values = _scores(score, candidates, u)
    test = unified_score(score, z, u)
    if not weights.sum() > 0:
        # no mass anywhere: p = 0 and nothing is ever covered
        t = None if alpha is None else wdist.NEG_INF
        return PValueResult(0.0, float(test), t, len(candidates))
    if alpha is not None and alpha < 0:
        raise InvalidArgumentError("alpha must be nonnegative")
    return _result(values, weights, test, alpha, 1.0, len(candidates))


def pvalue_mc(model: ConditionalModel, score, z: Dataset, u: PartialInfo, M: int, rng: np.random.Generator,
              alpha: float | None = None) -> PValueResult:
    """Monte Carlo p-value with the observed data counted as the zeroth draw."""
    if model.sampler is None:
        raise ConfigurationError(f"{model.name} has no sampler")
    if int(M) < 1:
        raise InvalidArgumentError("M must be at least 1")
    draws = [z] + [model.sampler(u, rng) for _ in range(int(M))]
    values = _scores(score, draws, u)
    return _result(values, np.ones(len(draws)), values[0], alpha, None, int(M))


def _log_mass(model: ConditionalModel, cand: Dataset, u: PartialInfo, observed: Dataset) -> float:
    if model.log_mass is not None:
        return float(model.log_mass(cand, u))
    # fall back to summing enumerated atoms equal to the candidate
    mass = sum(w for c, w in model.enumerate(observed, u) if c == cand)
    return float(np.log(mass)) if mass > 0 else -np.inf


def pvalue_is(target: ConditionalModel, proposal: ConditionalModel, score, z: Dataset, u: PartialInfo, M: int,
              rng: np.random.Generator, alpha: float | None = None) -> PValueResult:
    """Self-normalized importance-sampling p-value with draws from the proposal."""
    if proposal.sampler is None:
        raise ConfigurationError(f"{proposal.name} has no sampler")
    if int(M) < 1:
        raise InvalidArgumentError("M must be at least 1")
    draws = [z] + [proposal.sampler(u, rng) for _ in range(int(M))]
    log_r = np.array([_log_mass(proposal, c, u, z) for c in draws])
    if np.any(np.isneginf(log_r)):
        raise AbsoluteContinuityError("proposal assigns zero mass to a sampled or observed point")
    log_q = np.array([_log_mass(target, c, u, z) for c in draws])
    log_ratio = log_q - log_r
    if not np.any(np.isfinite(log_ratio)):
        raise AbsoluteContinuityError("target assigns zero mass to every draw")
    weights = np.exp(log_ratio - np.max(log_ratio))
    values = _scores(score, draws, u)
    return _result(values, weights, values[0], alpha, None, int(M))


# ------------------------------------------------------------ prediction sets


class SetPoint(NamedTuple):
    y: float
    member: bool
    p: float


def prediction_set(method, training: Sequence, x_test, y_grid: Sequence[float], alpha: float,
                   rng: np.random.Generator | None = None) -> list[SetPoint]:
    """Evaluate p(y) on a grid; auxiliary randomness is drawn once for the whole grid."""
    y_grid = list(y_grid)
    if not y_grid:
        raise InvalidArgumentError("empty y grid")
    rng = np.random.default_rng() if rng is None else rng
    aux = method.draw_aux(training, x_test, rng)
    out = []
    for y in y_grid:
        res = method.pvalue(augment(training, x_test, y), aux, alpha)
        out.append(SetPoint(float(y), bool(res.p > alpha), res.p))
    return out
