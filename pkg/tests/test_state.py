import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptcp.errors import StateError
from adaptcp.models import GaussianMean, Geometric, PoissonGamma, SegmentScorer, build_cache, log_marginal, log_prior_z
from adaptcp.state import ChangepointState, apply_toggle, log_posterior, neighbors


def _scorer(n=10, seed=0):
    y = np.random.default_rng(seed).normal(0, 1, n)
    model = GaussianMean(0.0, 1.0, 2.0)
    return SegmentScorer(build_cache(y, model), model, Geometric(0.2))


def test_neighbors_examples():
    assert neighbors(ChangepointState(10, []), 5) == (0, 10)
    s = ChangepointState(10, [3, 7])
    assert neighbors(s, 5) == (3, 7)
    assert neighbors(s, 3) == (0, 7)
    assert neighbors(s, 7) == (3, 10)


def test_invalid_positions():
    for bad in ([0], [10], [3, 3], [5, 2]):
        with pytest.raises(StateError):
            ChangepointState(10, bad)


def test_log_posterior_small_cases():
    model = GaussianMean(0.0, 1.0, 1.0)
    prior = Geometric(0.3)
    c2 = build_cache([0.5, -1.0], model)
    s = ChangepointState(2, [])
    assert log_posterior(s, c2, model, prior) == pytest.approx(log_prior_z(prior, [], 2) + log_marginal(c2, model, 1, 2))
    c3 = build_cache([0.5, -1.0, 2.0], model)
    s = ChangepointState(3, [1])
    expected = log_prior_z(prior, [1], 3) + log_marginal(c3, model, 1, 1) + log_marginal(c3, model, 2, 3)
    assert log_posterior(s, c3, model, prior) == pytest.approx(expected)


def test_toggle_involution():
    sc = _scorer()
    s = ChangepointState.from_positions([2, 6], sc)
    before = (s.z.copy(), list(s.positions), s.log_post, s.code)
    apply_toggle(s, 4, 1.25)
    assert s.k == 3 and s.positions == [2, 4, 6]
    apply_toggle(s, 4, -1.25)
    assert np.array_equal(s.z, before[0]) and s.positions == before[1] and s.code == before[3]
    assert s.log_post == pytest.approx(before[2], abs=1e-9)


def test_from_positions_rejects_impossible_state():
    # NegativeBinomial(2, .) gives zero mass to a gap of 1
    from adaptcp.models import NegativeBinomial

    model = PoissonGamma()
    sc = SegmentScorer(build_cache([1, 2, 3, 4], model), model, NegativeBinomial(2, 0.5))
    with pytest.raises(StateError):
        ChangepointState.from_positions([1, 2], sc)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 19), min_size=1, max_size=200))
def test_neighbors_bracket(flips):
    s = ChangepointState(20, [])
    for i in flips:
        s.toggle(i, 0.0)
        for j in range(1, 20):
            a, b = s.neighbors(j)
            assert a < j < b
            assert not any(a < p < b and p != j for p in s.positions)
    assert s.k == int(s.z.sum()) == len(s.positions)
    assert s.code == sum(1 << (p - 1) for p in s.positions)


def test_cached_log_post_drift():
    rng = np.random.default_rng(1)
    n = 200
    y = np.concatenate([rng.normal(0, 1, 100), rng.normal(3, 1, 100)])
    model = GaussianMean(0.0, 1.0, 4.0)
    sc = SegmentScorer(build_cache(y, model), model, Geometric(0.05))
    s = ChangepointState.from_positions([], sc)
    for i in rng.integers(1, n, 100_000):
        i = int(i)
        a, b = s.neighbors(i)
        delta = (sc.seg(a, i) + sc.seg(i, b)) - sc.seg(a, b)
        s.toggle(i, delta if not s.z[i] else -delta)
    assert abs(s.log_post - sc.log_posterior(s.positions)) <= 1e-6
    assert s.recompute(sc) <= 1e-6
