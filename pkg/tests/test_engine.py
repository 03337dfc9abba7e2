import numpy as np
import pytest

from unicp import core, engine, wdist
from unicp.core import DataPoint, Dataset, all_permutations, apply_perm, to_bag
from unicp.engine import BagOnly, ConditionalModel, pvalue_exact, pvalue_is, pvalue_mc, pvalue_unnormalized
from unicp.errors import AbsoluteContinuityError, ConfigurationError, ModelError


def data(ys):
    return Dataset([DataPoint((float(i),), float(y)) for i, y in enumerate(ys)])


def uniform_model():
    def enum(z, u):
        return [(apply_perm(z, s), 1.0) for s in all_permutations(len(z))]

    def sample(u, rng):
        return apply_perm(u.bag.as_dataset(), rng.permutation(len(u.bag)))

    return ConditionalModel(enum, sample, log_mass=lambda c, u: 0.0, name="uniform")


SCORE = core.abs_residual_mean()


def test_exact_pvalue_is_rank_fraction():
    z = data([0.0, 1.0, 2.0, 10.0])
    res = pvalue_exact(uniform_model(), SCORE, z, BagOnly(to_bag(z)), alpha=0.3)
    assert res.p == 0.25
    assert not res.member(0.3)
    assert res.test_score > res.threshold or res.threshold is wdist.NEG_INF


def test_support_violation_raises():
    z = data([0.0, 1.0, 2.0])
    bad = ConditionalModel(lambda zz, u: [(data([5.0, 1.0, 2.0]), 1.0)])
    with pytest.raises(ModelError):
        pvalue_exact(bad, SCORE, z, BagOnly(to_bag(z)))


def test_negative_weight_raises():
    z = data([0.0, 1.0])
    bad = ConditionalModel(lambda zz, u: [(zz, -1.0)])
    with pytest.raises(ModelError):
        pvalue_exact(bad, SCORE, z, BagOnly(to_bag(z)))


def test_exact_refuses_unnormalized_model():
    z = data([0.0, 1.0])
    m = ConditionalModel(lambda zz, u: [(zz, 0.3)], normalized=False)
    with pytest.raises(ModelError):
        pvalue_exact(m, SCORE, z, BagOnly(to_bag(z)))


def test_unnormalized_returns_raw_mass():
    z = data([0.0, 1.0, 5.0])
    m = ConditionalModel(lambda zz, u: [(core.swap(zz, k), w) for k, w in enumerate([0.2, 0.2, 0.2])],
                         normalized=False)
    res = pvalue_unnormalized(m, SCORE, z, BagOnly(to_bag(z)), alpha=0.1)
    assert res.p == pytest.approx(0.2)
    zero = ConditionalModel(lambda zz, u: [(zz, 0.0)], normalized=False)
    res0 = pvalue_unnormalized(zero, SCORE, z, BagOnly(to_bag(z)), alpha=0.1)
    assert res0.p == 0.0 and res0.threshold is wdist.NEG_INF


def test_mc_counts_observed_as_draw_zero():
    z = data([0.0, 1.0, 2.0, 3.0])
    rng = np.random.default_rng(0)
    res = pvalue_mc(uniform_model(), SCORE, z, BagOnly(to_bag(z)), 19, rng, alpha=0.1)
    assert res.p >= 1 / 20
    assert res.n_candidates_or_samples == 19
    no_sampler = ConditionalModel(lambda zz, u: [(zz, 1.0)])
    with pytest.raises(ConfigurationError):
        pvalue_mc(no_sampler, SCORE, z, BagOnly(to_bag(z)), 5, rng)


def test_mc_is_deterministic_given_rng():
    z = data([0.3, 1.0, -2.0, 3.0])
    a = pvalue_mc(uniform_model(), SCORE, z, BagOnly(to_bag(z)), 50, np.random.default_rng(4))
    b = pvalue_mc(uniform_model(), SCORE, z, BagOnly(to_bag(z)), 50, np.random.default_rng(4))
    assert a == b


def test_is_with_identical_models_equals_mc():
    z = data([0.3, 1.0, -2.0, 3.0])
    u = BagOnly(to_bag(z))
    a = pvalue_mc(uniform_model(), SCORE, z, u, 30, np.random.default_rng(2))
    b = pvalue_is(uniform_model(), uniform_model(), SCORE, z, u, 30, np.random.default_rng(2))
    assert a.p == b.p


def test_is_rejects_proposal_without_mass():
    z = data([0.3, 1.0, -2.0])
    u = BagOnly(to_bag(z))
    base = uniform_model()
    dead = ConditionalModel(base.enumerate, base.sampler, log_mass=lambda c, u: -np.inf)
    with pytest.raises(AbsoluteContinuityError):
        pvalue_is(base, dead, SCORE, z, u, 5, np.random.default_rng(0))


def test_prediction_set_grid():
    from unicp import standard_cp

    training = [DataPoint((0.0,), float(v)) for v in range(9)]
    out = engine.prediction_set(standard_cp(SCORE), training, (0.0,), np.linspace(-10, 20, 61), 0.2)
    members = [pt.y for pt in out if pt.member]
    assert members and min(members) > -10 and max(members) < 20
    assert all(pt.member == (pt.p > 0.2) for pt in out)
