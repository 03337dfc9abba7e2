import numpy as np
import pytest

from unicp import core, methods, simlab
from unicp.core import BagScore, DataPoint, Dataset, OrderedScore, augment
from unicp.errors import CapacityError, ConfigurationError, InvalidArgumentError
from unicp.oracle import random_instances

Y_SCORE = BagScore(lambda p, bag: p.y, name="y")
Y_ORDERED = OrderedScore(lambda p, data: p.y, name="y")
LS = core.abs_residual_ls()


def ydata(ys, xs=None):
    xs = range(len(ys)) if xs is None else xs
    return Dataset([DataPoint((float(x),), float(y)) for x, y in zip(xs, ys)])


def instances(count, size, seed=0):
    stream = random_instances(np.random.default_rng(seed), size, size)
    return [next(stream) for _ in range(count)]


def test_standard_cp_examples():
    m = methods.standard_cp(Y_SCORE)
    assert m.pvalue(ydata([1, 2, 3])).p == pytest.approx(1 / 3)
    assert m.pvalue(ydata([2, 2, 2])).p == 1.0


def test_split_cp_example_and_range():
    # knn(1) over a one-point prefix at y=0 gives |y|
    score = core.knn_residual(1)
    z = Dataset([DataPoint((0.0,), 0.0)] + [DataPoint((0.0,), v) for v in (1, 2, 3, 4, 2.5)])
    m = methods.split_cp(score, 1)
    assert m.quantile_member(z, None, 0.25)
    assert m.pvalue(z).p > 0.25
    with pytest.raises(ConfigurationError):
        methods.split_cp(score, 5).pvalue(z)
    with pytest.raises(ConfigurationError):
        methods.split_cp(score, 0)


def test_wcp_examples():
    z = ydata([1, 2, 3])
    weights = {0.0: 1.0, 1.0: 1.0, 2.0: 2.0}
    m = methods.wcp(Y_SCORE, lambda p: weights[p.x[0]])
    assert m.pvalue(z).p == 0.5
    const = methods.wcp(LS, lambda p: 3.0)
    for inst in instances(20, 4):
        assert const.pvalue(inst.z).p == methods.standard_cp(LS).pvalue(inst.z).p
    with pytest.raises(InvalidArgumentError):
        methods.wcp(Y_SCORE, lambda p: 0.0).pvalue(z)


def test_wcp_unnormalized_identities():
    rng = np.random.default_rng(3)
    for inst in instances(30, 4, seed=3):
        z = inst.z
        table = {p: float(rng.uniform(0.1, 2)) for p in z.points}
        w = table.__getitem__
        pu = methods.wcp_unnormalized(LS, w).pvalue(z).p
        pn = methods.wcp(LS, w).pvalue(z).p
        total = sum(w(p) for p in z.points)
        assert pu * len(z) / total == pytest.approx(pn, rel=1e-12)
        one = methods.wcp_unnormalized(LS, lambda p: 1.0).pvalue(z).p
        two = methods.wcp_unnormalized(LS, lambda p: 2.0).pvalue(z).p
        assert one == methods.standard_cp(LS).pvalue(z).p
        assert two == pytest.approx(2 * one)


def test_nexcp_examples():
    m = methods.nexcp(Y_ORDERED, methods.NexWeights([0.4, 0.6]))
    assert m.pvalue(ydata([1, 2]), 1).p == pytest.approx(0.6)
    degenerate = methods.nexcp(core.recency_weighted_ls(0.9), methods.NexWeights([0.0, 0.0, 1.0]))
    inst = instances(1, 3)[0]
    aux = degenerate.draw_aux(inst.training, inst.x_test, np.random.default_rng(0))
    assert aux == 2 and degenerate.pvalue(inst.z, aux).p == 1.0
    with pytest.raises(ConfigurationError):
        methods.NexWeights([0.6, 0.4])


def test_nexcp_unified_p_below_p_star():
    score = core.recency_weighted_ls(0.7)
    for size in (3, 4, 5):
        m = methods.nexcp(score, methods.NexWeights.geometric(size, 0.6))
        for inst in instances(30, size, seed=size):
            for k in range(size):
                assert m.engine_pvalue(inst.z, k).p <= m.pvalue(inst.z, k).p + 1e-12


def test_rlcp_reduces_to_standard_when_features_equal():
    z = Dataset([DataPoint((0.5,), float(v)) for v in (0.1, 2.0, -1.0, 0.7)])
    rng = np.random.default_rng(0)
    m = methods.rlcp(LS, methods.Gaussian(0.5))
    aux = m.draw_aux(z.points[:-1], z.last.x, rng)
    assert m.pvalue(z, aux).p == pytest.approx(methods.standard_cp(LS).pvalue(z).p, abs=1e-12)
    wide = methods.rlcp(LS, methods.Gaussian(1e6))
    for inst in instances(10, 4):
        a = wide.draw_aux(inst.training, inst.x_test, rng)
        assert wide.pvalue(inst.z, a).p == pytest.approx(methods.standard_cp(LS).pvalue(inst.z).p, abs=1e-6)


def test_gaussian_kernel_normalization():
    g = methods.Gaussian(0.7)
    assert np.exp(g.log_h(np.zeros((1, 2)), (0.0, 0.0)))[0] == pytest.approx((2 * np.pi * 0.49) ** -1)
    with pytest.raises(InvalidArgumentError):
        methods.Gaussian(0.0)


def test_kernel_matrix_rows_sum_to_one():
    X = np.random.default_rng(0).standard_normal((6, 2))
    H = methods.kernel_matrix(methods.Gaussian(0.8), X)
    assert np.max(np.abs(H.sum(axis=1) - 1)) <= 1e-12


def test_rlcp_resample_equal_features():
    z = Dataset([DataPoint((1.0,), float(v)) for v in (0.1, 2.0, -1.0, 0.7)])
    m = methods.rlcp_resample(LS, methods.Gaussian(1.0))
    for k in range(4):
        assert m.pvalue(z, k).p == pytest.approx(methods.standard_cp(LS).pvalue(z).p, abs=1e-12)


def test_gwcp_reductions():
    ex = methods.LikelihoodRatio.exchangeable()
    spec = simlab.CovariateShift(n=3, test_mean=0.8)
    for inst in instances(20, 4, seed=7):
        z = inst.z
        assert methods.gwcp(LS, ex).pvalue(z).p == pytest.approx(methods.standard_cp(LS).pvalue(z).p, abs=1e-12)
        g = methods.gwcp(LS, spec.permutation_lr()).pvalue(z).p
        w = methods.wcp(LS, spec.wstar).pvalue(z).p
        assert g == pytest.approx(w, abs=1e-12)
        ns = methods.gwcp_nonsym(core.lift(LS), spec.permutation_lr()).pvalue(z).p
        assert ns == pytest.approx(g, abs=1e-12)


def test_gwcp_history_free_fcs_is_standard():
    # acquisition that ignores history: all features iid, ratio identically 1
    lr = methods.LikelihoodRatio.product([lambda p: -0.5 * p.x[0] ** 2] * 4)
    for inst in instances(10, 4, seed=2):
        assert methods.gwcp(LS, lr).pvalue(inst.z).p == pytest.approx(methods.standard_cp(LS).pvalue(inst.z).p)


def test_gwcp_capacity_and_identity_checks():
    big = ydata(range(9))
    with pytest.raises(CapacityError):
        methods.gwcp(LS, methods.LikelihoodRatio.exchangeable()).pvalue(big)
    broken = methods.LikelihoodRatio(lambda z, s: 1.0)
    with pytest.raises(InvalidArgumentError):
        methods.gwcp(LS, broken).pvalue(ydata([1, 2, 3]))
    with pytest.raises(ConfigurationError):
        methods.gwcp(Y_ORDERED, methods.LikelihoodRatio.exchangeable())


def test_gwcp_nonsym_hand_enumeration():
    z = ydata([1.0, 3.0, 2.0])
    m = methods.gwcp_nonsym(Y_ORDERED, methods.LikelihoodRatio.exchangeable())
    # the last position takes each value in two of six orders; 2 and 3 are >= 2
    assert m.pvalue(z).p == pytest.approx(4 / 6)


def test_gwcp_is_tracks_exact():
    spec = simlab.FCS(n=4)
    rng = np.random.default_rng(1)
    score = core.recency_weighted_ls(0.9)
    for _ in range(3):
        draw = simlab.generate(spec, rng)
        z = augment(draw.training, draw.test.x, draw.test.y)
        exact = methods.gwcp_nonsym(score, spec.permutation_lr()).pvalue(z).p
        approx = methods.gwcp_is(score, spec.permutation_lr(), M=4000)
        aux = approx.draw_aux(draw.training, draw.test.x, rng)
        assert abs(approx.pvalue(z, aux).p - exact) < 0.03


def test_gwcp_is_uniform_target_is_mc():
    m = methods.gwcp_is(Y_ORDERED, methods.LikelihoodRatio.exchangeable(), M=99)
    z = ydata([1.0, 3.0, 2.0, 0.0])
    aux = m.draw_aux(z.points[:-1], z.last.x, np.random.default_rng(0))
    res = m.pvalue(z, aux)
    assert res.p * 100 == pytest.approx(round(res.p * 100))


def test_randomized_constructors_are_seeded():
    inst = instances(1, 5)[0]
    for m in (methods.rlcp(LS, methods.Gaussian(1.0)), methods.rlcp_resample(LS, methods.Gaussian(1.0)),
              methods.nexcp(core.recency_weighted_ls(0.9), methods.NexWeights.geometric(5, 0.5))):
        a = m.draw_aux(inst.training, inst.x_test, np.random.default_rng(11))
        b = m.draw_aux(inst.training, inst.x_test, np.random.default_rng(11))
        assert a == b
