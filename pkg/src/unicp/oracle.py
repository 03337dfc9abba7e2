"""Brute-force references: full permutation enumeration and exact toy-law type I error."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .core import DataPoint, Dataset, OrderedScore, Permutation, all_permutations, apply_perm, augment
from .errors import CapacityError

MAX_ORACLE_POINTS = 8
MAX_TOY_OUTCOMES = 10**6


def pvalue_bruteforce(weight_fn: Callable[[Dataset, Permutation], float], score: OrderedScore, z: Dataset,
                      normalize: bool = True) -> float:
    """Weighted tail fraction of φ(z_σ) = score((z_σ)_last, z_σ) over all σ.

    With normalize=False the raw tail mass is returned (unnormalized models).
    """
    if len(z) > MAX_ORACLE_POINTS:
        raise CapacityError(f"brute force limited to {MAX_ORACLE_POINTS} points")
    observed = score(z.last, z)
    tail = 0.0
    total = 0.0
    for sigma in all_permutations(len(z)):
        w = float(weight_fn(z, sigma))
        if w == 0.0:
            continue
        zs = apply_perm(z, sigma)
        total += w
        if score(zs.last, zs) >= observed:
            tail += w
    return tail / total if normalize else tail


class Instance(NamedTuple):
    training: tuple[DataPoint, ...]
    x_test: tuple[float, ...]
    y: float

    @property
    def z(self) -> Dataset:
        return augment(self.training, self.x_test, self.y)


def random_instances(rng: np.random.Generator, min_points: int = 2, max_points: int = 5, d: int = 1,
                     tie_prob: float = 0.3) -> Iterable[Instance]:
    """Endless stream of small instances; some use a coarse grid so scores tie."""
    while True:
        size = int(rng.integers(min_points, max_points + 1))
        if rng.random() < tie_prob:
            X = rng.integers(-2, 3, size=(size, d)).astype(float) / 2
            y = rng.integers(-2, 3, size=size).astype(float)
        else:
            X = rng.standard_normal((size, d))
            y = X.sum(axis=1) + rng.standard_normal(size)
        pts = tuple(DataPoint(X[i], y[i]) for i in range(size - 1))
        yield Instance(pts, tuple(X[-1]), float(y[-1]))


@dataclass(frozen=True)
class OracleReport:
    max_abs_diff: float
    cases_checked: int
    first_failure: str | None = None

    def passed(self, tol: float = 1e-12) -> bool:
        return self.first_failure is None and self.max_abs_diff <= tol


def method_bruteforce(method, z: Dataset, aux) -> float:
    return pvalue_bruteforce(lambda zz, s: method.permutation_weight(zz, aux, s), method.oracle_score(z, aux), z,
                             normalize=method.normalized)


def check_method_equivalence(method, instances: Iterable[Instance] | Callable[[np.random.Generator], Iterable[Instance]],
                             count: int = 200, seed: int = 0, tol: float = 1e-12) -> OracleReport:
    """Compare the method's engine p-value with full enumeration on `count` instances.

    Auxiliary randomness (swap index, anchor) is drawn per instance from the
    seeded stream and then held fixed for both paths.
    """
    rng = np.random.default_rng(seed)
    stream = instances(rng) if callable(instances) else instances
    worst = 0.0
    failure = None
    checked = 0
    for inst in stream:
        if checked >= count:
            break
        z = inst.z
        try:
            aux = method.draw_aux(inst.training, inst.x_test, rng)
            fast = method.engine_pvalue(z, aux).p
            slow = method_bruteforce(method, z, aux)
        except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
            failure = failure or f"case {checked}: {type(exc).__name__}: {exc}"
            checked += 1
            continue
        diff = abs(fast - slow)
        worst = max(worst, diff)
        if diff > tol and failure is None:
            failure = f"case {checked}: engine p={fast!r} brute force p={slow!r} z={z!r} aux={aux!r}"
        checked += 1
    return OracleReport(worst, checked, failure)


# ------------------------------------------------------------ toy laws


@dataclass(frozen=True)
class ToyLaw:
    """Explicit outcome table of ordered datasets with exact probabilities."""

    outcomes: tuple[tuple[Dataset, Fraction], ...]

    def __post_init__(self):
        total = sum(p for _, p in self.outcomes)
        if total != 1:
            raise ValueError(f"toy law probabilities sum to {total}")

    def __len__(self):
        return len(self.outcomes)


def product_law(marginals: Sequence[Sequence[tuple[DataPoint, Fraction]]]) -> ToyLaw:
    """Independent coordinates with the given finite marginal tables."""
    size = 1
    for m in marginals:
        size *= len(m)
    if size > MAX_TOY_OUTCOMES:
        raise CapacityError(f"{size} outcomes exceed {MAX_TOY_OUTCOMES}")
    outcomes = []
    for combo in _product(marginals):
        prob = Fraction(1)
        for _, p in combo:
            prob *= Fraction(p)
        outcomes.append((Dataset([pt for pt, _ in combo]), prob))
    return ToyLaw(tuple(outcomes))


def _product(marginals):
    if not marginals:
        yield ()
        return
    for head in marginals[0]:
        for tail in _product(marginals[1:]):
            yield (head,) + tail


def iid_law(marginal: Sequence[tuple[DataPoint, Fraction]], size: int) -> ToyLaw:
    return product_law([marginal] * size)


def exact_type1(method, law: ToyLaw, alpha: float, cost_per_case: int | None = None) -> Fraction:
    """P(p <= alpha) under the toy law, marginalizing the method's auxiliary draw.

    Probabilities are exact rationals; the auxiliary weights are converted
    exactly from floats (dyadic weights stay exact).
    """
    size = len(law.outcomes[0][0])
    per_case = cost_per_case if cost_per_case is not None else size
    first_training = law.outcomes[0][0].points[:-1]
    n_aux = len(method.aux_support(first_training, law.outcomes[0][0].last.x))
    if len(law) * n_aux * per_case > MAX_TOY_OUTCOMES:
        raise CapacityError("toy enumeration exceeds the outcome budget")
    rejected = Fraction(0)
    for z, prob in law.outcomes:
        training, x_test = z.points[:-1], z.last.x
        support = method.aux_support(training, x_test)
        aux_total = sum(Fraction(w) for _, w in support)
        for aux, w in support:
            if method.pvalue(z, aux).p <= alpha:
                rejected += prob * Fraction(w) / aux_total
    return rejected



# ------------------------------------------------------------ standard suite


def _suite_factories():
    from . import core, methods, simlab

    def tilt(p):
        return float(np.exp(0.5 * p.x[0]))

    def shift_lr(size):
        return simlab.CovariateShift(n=size - 1, test_mean=0.7).permutation_lr()

    ls, rec = core.abs_residual_ls(), core.recency_weighted_ls(0.8)
    return {
        "standard_cp": (2, lambda s: methods.standard_cp(ls)),
        "split_cp": (3, lambda s: methods.split_cp(core.knn_residual(1), 1)),
        "wcp": (2, lambda s: methods.wcp(ls, tilt)),
        "wcp_unnormalized": (2, lambda s: methods.wcp_unnormalized(ls, tilt)),
        "nexcp": (2, lambda s: methods.nexcp(rec, methods.NexWeights.geometric(s, 0.7))),
        "rlcp_gaussian": (2, lambda s: methods.rlcp(ls, methods.Gaussian(1.0))),
        "rlcp_box": (2, lambda s: methods.rlcp(ls, methods.Box(1.0))),
        "rlcp_resample": (2, lambda s: methods.rlcp_resample(ls, methods.Gaussian(1.0))),
        "gwcp": (2, lambda s: methods.gwcp(ls, shift_lr(s))),
        "gwcp_nonsym": (2, lambda s: methods.gwcp_nonsym(rec, shift_lr(s))),
    }


def run_suite(max_points: int = 5, cases: int = 200, seed: int = 0, tol: float = 1e-12) -> dict[str, OracleReport]:
    """Engine vs. brute force for every exact method, spreading `cases` over sizes up to max_points."""
    if max_points > MAX_ORACLE_POINTS:
        raise CapacityError(f"brute force limited to {MAX_ORACLE_POINTS} points")
    out = {}
    for offset, (name, (lo, factory)) in enumerate(_suite_factories().items()):
        sizes = list(range(lo, max_points + 1))
        if not sizes:
            continue
        per = -(-cases // len(sizes))
        worst, checked, failure = 0.0, 0, None
        for size in sizes:
            rep = check_method_equivalence(
                factory(size), lambda rng, s=size: random_instances(rng, s, s), count=per,
                seed=seed * 1000 + offset * 10 + size, tol=tol)
            worst = max(worst, rep.max_abs_diff)
            checked += rep.cases_checked
            if failure is None and rep.first_failure:
                failure = f"size {size}: {rep.first_failure}"
        out[name] = OracleReport(worst, checked, failure)
    return out


# ------------------------------------------------------------ toy-law type I suite

TYPE1_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def _table(xs, x_probs, ys=(0.0, 1.0)):
    """Joint table with x ~ x_probs and y = x + e, e uniform on ys."""
    return [(DataPoint((float(x),), float(x) + e), Fraction(p) / len(ys)) for x, p in zip(xs, x_probs) for e in ys]


def toy_covariate_shift(train_size: int = 3):
    """Train x on {0,1,2} w.p. (1/2,1/4,1/4), test x w.p. (1/4,1/4,1/2); returns (law, w*)."""
    xs = (0, 1, 2)
    train = _table(xs, (Fraction(1, 2), Fraction(1, 4), Fraction(1, 4)))
    test = _table(xs, (Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)))
    ratio = {0.0: 0.5, 1.0: 1.0, 2.0: 2.0}
    return product_law([train] * train_size + [test]), (lambda p: ratio[p.x[0]])


def _suite_laws():
    from . import core, methods

    iid = iid_law(_table((0, 1, 2), (Fraction(1, 2), Fraction(1, 4), Fraction(1, 4))), 4)
    shift_law, wstar = toy_covariate_shift(3)
    margs = [_table((0, 1), (Fraction(1, 2), Fraction(1, 2))),
             _table((0, 1), (Fraction(1, 4), Fraction(3, 4))),
             _table((0, 1), (Fraction(3, 4), Fraction(1, 4))),
             _table((0, 1), (Fraction(1, 8), Fraction(7, 8)))]
    tables = [{p: float(np.log(float(q))) for p, q in m} for m in margs]
    lr = methods.LikelihoodRatio.product([t.__getitem__ for t in tables])
    mean = core.abs_residual_mean()
    return {
        "standard_cp": (methods.standard_cp(mean), iid),
        "wcp_wstar": (methods.wcp(mean, wstar), shift_law),
        "gwcp_product": (methods.gwcp(mean, lr), product_law(margs)),
        "nexcp_star": (methods.nexcp(core.recency_weighted_ls(0.8), methods.NexWeights.geometric(4, 0.5)), iid),
    }


def run_type1_suite(alphas: Sequence[float] = TYPE1_ALPHAS) -> dict[str, list[tuple[float, Fraction]]]:
    """Exact P(p <= alpha) for each (method, toy law) pair at every alpha."""
    return {name: [(a, exact_type1(method, law, a)) for a in alphas]
            for name, (method, law) in _suite_laws().items()}


def type1_ok(rows: Sequence[tuple[float, Fraction]]) -> bool:
    return all(rate <= Fraction(str(a)) for a, rate in rows)
