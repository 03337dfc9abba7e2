import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unicp import wdist
from unicp.errors import InvalidArgumentError
from unicp.wdist import NEG_INF, WeightedMeasure

values_st = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=12)


def test_merges_equal_atoms():
    m = WeightedMeasure([2.0, 1.0, 2.0], [0.25, 0.5, 0.25])
    assert m.atoms == [(1.0, 0.5), (2.0, 0.5)]
    assert m.is_normalized()


def test_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        WeightedMeasure([])
    with pytest.raises(InvalidArgumentError):
        WeightedMeasure([1.0], [-1.0])
    with pytest.raises(InvalidArgumentError):
        WeightedMeasure([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        WeightedMeasure([np.nan])


def test_quantile_examples():
    m = WeightedMeasure([1.0, 2.0, 3.0], [0.2, 0.3, 0.5])
    assert wdist.quantile(m, 0.2) == 1.0
    assert wdist.quantile(m, 0.21) == 2.0
    assert wdist.quantile(m, 1.0) == 3.0
    assert wdist.quantile(m, 0.0) == 1.0
    with pytest.raises(InvalidArgumentError):
        wdist.quantile(m, 1.5)
    with pytest.raises(InvalidArgumentError):
        wdist.quantile(WeightedMeasure([1.0], [2.0]), 0.5)


def test_tail_and_threshold_examples():
    m = WeightedMeasure([1.0, 2.0, 3.0], [0.25, 0.25, 0.5])
    assert wdist.tail_prob(m, 2.0) == 0.75
    assert wdist.tail_prob(m, 3.5) == 0.0
    assert wdist.threshold(m, 0.5) == 2.0
    assert wdist.threshold(m, 0.49) == 3.0


def test_unnormalized_threshold_examples():
    m = WeightedMeasure([1.0, 2.0], [0.7, 0.7])
    assert wdist.threshold_unnormalized(m, 1.5) is NEG_INF
    assert wdist.threshold_unnormalized(m, 0.7) == 1.0
    assert wdist.threshold_unnormalized(m, 0.5) == 2.0
    with pytest.raises(InvalidArgumentError):
        wdist.threshold_unnormalized(m, -0.1)


def test_neg_inf_orders_below_everything():
    assert NEG_INF <= -1e308 and NEG_INF < 0.0
    assert not NEG_INF >= -1e308
    assert not (-1e308 <= NEG_INF)
    assert str(NEG_INF) == "-inf"


def test_quantile_inflate_examples():
    assert wdist.quantile_inflate([1, 2, 3, 4], 0.25) == 4.0
    assert wdist.quantile_inflate([1, 2, 3, 4], 0.5) == 3.0
    # level above 1 is clipped to the maximum
    assert wdist.quantile_inflate([1, 2, 3], 0.01) == 3.0
    assert wdist.inflate_rank(3, 0.01) == 4


@given(values_st, st.lists(st.integers(0, 8), min_size=12, max_size=12), st.integers(1, 31))
@settings(max_examples=300, deadline=None)
def test_tail_threshold_duality_dyadic(values, counts, alpha_num):
    weights = [float(c) for c in counts[: len(values)]]
    if sum(weights) == 0:
        weights[0] = 1.0
    m = WeightedMeasure(values, weights)
    alpha = alpha_num / 32
    t = wdist.threshold(m, alpha)
    for x in set(values) | {min(values) - 1, max(values) + 1}:
        assert (wdist.tail_fraction(m, x) > alpha) == (x <= t)


@given(values_st, st.floats(0.0, 1.0))
@settings(max_examples=300, deadline=None)
def test_duality_against_cdf_quantile_on_dyadic_measure(values, _):
    # uniform weights over 2**k points keep the cdf exact
    k = 3
    vals = (values * 8)[: 2**k]
    m = WeightedMeasure(vals, np.full(len(vals), 1 / 8))
    for j in range(1, 8):
        alpha = j / 8
        q = wdist.quantile(m, 1 - alpha)
        for x in set(vals):
            assert (wdist.tail_prob(m, x) > alpha) == (x <= q)


@given(values_st, st.lists(st.floats(0.0, 3.0), min_size=12, max_size=12), st.floats(0.0, 4.0))
@settings(max_examples=300, deadline=None)
def test_unnormalized_duality(values, weights, alpha):
    w = weights[: len(values)]
    if sum(w) == 0:
        w[0] = 1.0
    m = WeightedMeasure(values, w)
    t = wdist.threshold_unnormalized(m, alpha)
    for x in set(values):
        assert (wdist.tail_prob(m, x) > alpha) == (x <= t)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=7), st.floats(-10, 10), st.floats(0.01, 0.99))
@settings(max_examples=300, deadline=None)
def test_quantile_inflate_matches_augmented_rank(cal, test, alpha):
    m = len(cal)
    p = (1 + sum(c >= test for c in cal)) / (m + 1)
    member = True if wdist.inflate_rank(m, alpha) > m else test <= wdist.quantile_inflate(cal, alpha)
    assert member == (p > alpha)


def test_scaled_and_normalized():
    m = WeightedMeasure([1.0, 2.0], [1.0, 3.0])
    assert m.normalized().total == pytest.approx(1.0)
    assert m.scaled(2.0).total == 8.0
