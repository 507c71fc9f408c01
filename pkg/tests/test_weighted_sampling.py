import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from adaptcp.errors import SamplingError
from adaptcp.state import ChangepointState
from adaptcp.weighted_sampling import (
    SelectionWeights,
    build_alias,
    carpenter_sample,
    sample_add_position,
    sample_delete_position,
)

import oracles

SIG = 1e-4


def _chi2_pvalue(counts, probs):
    counts = np.asarray(counts, dtype=float)
    expected = np.asarray(probs) * counts.sum()
    keep = expected > 0
    assert counts[~keep].sum() == 0
    return stats.chisquare(counts[keep], expected[keep]).pvalue


# --- alias tables -----------------------------------------------------------


def test_alias_trivial_examples():
    np.testing.assert_allclose(build_alias([1, 1, 1]).probabilities(), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(build_alias([1, 3]).probabilities(), [0.25, 0.75], atol=1e-15)


def test_alias_rejects_bad_weights():
    for bad in ([], [1.0, 0.0], [1.0, -2.0], [1.0, float("nan")], [float("inf")]):
        with pytest.raises(SamplingError):
            build_alias(bad)


def test_alias_chi_square():
    rng = np.random.default_rng(0)
    table = build_alias([0.1, 0.2, 0.3, 0.4])
    counts = np.bincount(table.sample_many(rng, 10**7), minlength=4)
    assert _chi2_pvalue(counts, [0.1, 0.2, 0.3, 0.4]) > SIG
    expected = np.array([0.1, 0.2, 0.3, 0.4]) * 1e7
    assert np.all(np.abs(counts - expected) <= 4 * np.sqrt(expected * (1 - expected / 1e7)))


def test_alias_chi_square_large():
    rng = np.random.default_rng(1)
    w = rng.gamma(0.5, size=1000) + 1e-3
    table = build_alias(w)
    counts = np.bincount(table.sample_many(rng, 10**7), minlength=1000)
    assert _chi2_pvalue(counts, w / w.sum()) > SIG


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=1000))
def test_alias_exactness(weights):
    w = np.array(weights)
    table = build_alias(w)
    assert np.all((table.prob >= 0) & (table.prob <= 1 + 1e-12))
    np.testing.assert_allclose(table.probabilities(), w / w.sum(), rtol=0, atol=1e-12)


def test_alias_scalar_sample_uses_two_uniforms():
    table = build_alias([1, 3])
    seq = iter([0.0, 0.99, 0.9, 0.1])
    # slot 0 keeps itself with prob 0.5; u=0.99 sends it to its alias
    assert table.sample(lambda: next(seq)) == 1
    assert table.sample(lambda: next(seq)) == 1


# --- add proposals ----------------------------------------------------------


def _weights(n, positions, log_a, **kw):
    state = ChangepointState(n, positions)
    la = np.zeros(n + 1)
    la[1:n] = log_a
    return state, SelectionWeights(n, state, log_a=la, **kw)


def _add_frequencies(w, state, draws, seed=0):
    rng = np.random.default_rng(seed)
    counts = np.zeros(state.n + 1)
    for _ in range(draws):
        i, _, _ = sample_add_position(w, state, rng)
        counts[i] += 1
    return counts


def test_add_uniform_when_flat():
    state, w = _weights(6, [2, 4], [0.0] * 5, thresholding=False)
    rng = np.random.default_rng(0)
    for _ in range(200):
        i, log_fwd, _ = sample_add_position(w, state, rng)
        assert i in (1, 3, 5)
        assert log_fwd == pytest.approx(math.log(1 / 3))


def test_add_normalisation_example():
    state, w = _weights(4, [], np.log([2.0, 1.0, 1.0]), thresholding=False)
    assert w.hat_a(1) / w.add_mass() == pytest.approx(0.5)
    counts = _add_frequencies(w, state, 40_000)
    assert _chi2_pvalue(counts[1:4], [0.5, 0.25, 0.25]) > SIG


def test_thresholded_example():
    state, w = _weights(4, [], [0.0, math.log(10.0), 0.0], thresholding=True, log_cutoff=1.0, log_a_inactive=0.0)
    assert w.active_list == [2]
    assert w.hat_a(2) / w.add_mass() == pytest.approx(10 / 12)
    counts = _add_frequencies(w, state, 60_000)
    assert _chi2_pvalue(counts[1:4], [1 / 12, 10 / 12, 1 / 12]) > SIG


def _formula(n, positions, log_a, log_cutoff, log_a_inactive):
    """Thresholded add distribution written out directly."""
    z = np.zeros(n + 1, dtype=bool)
    z[positions] = True
    hat = np.zeros(n + 1)
    for i in range(1, n):
        if not z[i]:
            hat[i] = math.exp(log_a[i - 1]) if log_a[i - 1] > log_cutoff else math.exp(log_a_inactive)
    return hat / hat.sum()


def test_thresholded_proposal_matches_formula_exhaustively():
    rng = np.random.default_rng(5)
    for n in range(3, 11):
        for _ in range(3):
            log_a = rng.choice([-1.0, 0.0, 0.5, 1.5, 2.5, 4.0], n - 1)
            for code, pos in oracles.all_configurations(n):
                if len(pos) == n - 1:
                    continue
                state, w = _weights(n, pos, log_a, thresholding=True, log_cutoff=1.0, log_a_inactive=0.0)
                ref = _formula(n, pos, log_a, 1.0, 0.0)
                for i in range(1, n):
                    if not state.z[i]:
                        assert math.exp(w.hat_log_a(i) - math.log(w.add_mass())) == pytest.approx(ref[i], rel=1e-12)
    # and the sampler actually realises it
    n, pos = 8, [2, 5]
    log_a = np.array([3.0, 0.0, -1.0, 2.0, 0.0, 0.0, 1.5])
    state, w = _weights(n, pos, log_a, thresholding=True, log_cutoff=1.0, log_a_inactive=0.0)
    counts = _add_frequencies(w, state, 100_000, seed=9)
    assert _chi2_pvalue(counts, _formula(n, pos, log_a, 1.0, 0.0)) > SIG


def test_add_fallback_under_heavy_occupancy():
    # one free active position among many occupied ones forces the redraw fallback
    n = 400
    pos = [i for i in range(1, n) if i != 200]
    log_a = np.full(n - 1, 5.0)
    state, w = _weights(n, pos, log_a)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_add_position(w, state, rng)[0] == 200


def test_add_impossible_when_full():
    state, w = _weights(4, [1, 2, 3], [0.0] * 3)
    with pytest.raises(SamplingError):
        sample_add_position(w, state, np.random.default_rng(0))


# --- delete proposals -------------------------------------------------------


def _delete_setup(positions, d):
    n = 10
    state = ChangepointState(n, positions)
    ld = np.zeros(n + 1)
    ld[positions] = np.log(d)
    return state, SelectionWeights(n, state, log_d=ld)


def test_delete_single():
    state, w = _delete_setup([4], [3.0])
    i, log_fwd, _ = sample_delete_position(w, state, np.random.default_rng(0))
    assert i == 4 and log_fwd == pytest.approx(0.0)


def test_delete_equal_weights():
    state, w = _delete_setup([3, 7], [1.0, 1.0])
    rng = np.random.default_rng(0)
    hits = sum(sample_delete_position(w, state, rng)[0] == 3 for _ in range(20_000))
    assert abs(hits - 10_000) <= 4 * math.sqrt(5_000)


def test_delete_weighted():
    state, w = _delete_setup([2, 5, 8], [1.0, 2.0, 3.0])
    rng = np.random.default_rng(1)
    counts = np.zeros(11)
    for _ in range(10**6):
        counts[sample_delete_position(w, state, rng)[0]] += 1
    probs = np.array([1, 2, 3]) / 6
    got = counts[[2, 5, 8]]
    assert np.all(np.abs(got - probs * 1e6) <= 4 * np.sqrt(1e6 * probs * (1 - probs)))


def test_delete_impossible_when_empty():
    state, w = _delete_setup([], [])
    with pytest.raises(SamplingError):
        sample_delete_position(w, state, np.random.default_rng(0))


# --- weight bookkeeping -----------------------------------------------------


def test_clamping_keeps_weights_positive():
    rng = np.random.default_rng(2)
    n = 30
    state = ChangepointState(n, [5, 10])
    w = SelectionWeights(n, state)
    for _ in range(5000):
        i = int(rng.integers(1, n))
        step = float(rng.normal(0, 20))
        if rng.random() < 0.5:
            w.shift_log_a(i, step, bool(state.z[i]))
        else:
            w.shift_log_d(i, step, bool(state.z[i]))
    assert w.a_w.min() >= math.exp(w.log_floor) > 0
    assert w.d_w.min() >= math.exp(w.log_floor)
    assert w.log_a.max() <= w.log_ceil
    # running sums agree with a fresh recomputation
    mass, dsum = w.add_mass(), w.d_sum
    w.resync(state)
    assert mass == pytest.approx(w.add_mass(), rel=1e-9)
    assert dsum == pytest.approx(w.d_sum, rel=1e-9)


def test_invalid_threshold_configuration():
    state = ChangepointState(5, [])
    with pytest.raises(SamplingError):
        SelectionWeights(5, state, log_cutoff=0.0, log_a_inactive=0.5)
    with pytest.raises(SamplingError):
        SelectionWeights(5, state, log_floor=1.0, log_ceil=0.0)


# --- Carpenter --------------------------------------------------------------


def test_carpenter_single_category():
    out = carpenter_sample([0.0], 1000, np.random.default_rng(0))
    assert np.all(out == 0)


def test_carpenter_output_sorted_and_degenerate_error():
    out = carpenter_sample(np.log([0.2, 0.3, 0.5]), 500, np.random.default_rng(0))
    assert np.all(np.diff(out) >= 0)
    with pytest.raises(SamplingError):
        carpenter_sample([-np.inf, -np.inf], 10, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        carpenter_sample([0.0], 0, np.random.default_rng(0))


def test_carpenter_skips_zero_probability_categories():
    out = carpenter_sample([0.0, -np.inf, 0.0, -np.inf], 10**5, np.random.default_rng(3))
    assert set(np.unique(out)) <= {0, 2}


def test_carpenter_binomial():
    out = carpenter_sample(np.log([0.5, 0.5]), 10**6, np.random.default_rng(4))
    ones = int(out.sum())
    assert abs(ones - 5e5) <= 4 * math.sqrt(2.5e5)


def test_carpenter_matches_inverse_cdf_two_sample():
    rng = np.random.default_rng(6)
    p = rng.dirichlet(np.ones(5))
    a = np.bincount(carpenter_sample(np.log(p), 10**6, rng), minlength=5)
    b = np.bincount(oracles.inverse_cdf_sample(p, 10**6, rng), minlength=5)
    assert stats.chi2_contingency(np.vstack([a, b]))[1] > SIG


def test_carpenter_chi_square_large():
    rng = np.random.default_rng(8)
    p = rng.dirichlet(np.full(1000, 0.7))
    counts = np.bincount(carpenter_sample(np.log(p), 10**7, rng), minlength=1000)
    assert _chi2_pvalue(counts, p) > SIG


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 100), st.integers(0, 2**32 - 1))
def test_carpenter_equivalent_to_inverse_cdf(m, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(m))
    draws = 50_000
    a = np.bincount(carpenter_sample(np.log(p), draws, rng), minlength=m)
    b = np.bincount(oracles.inverse_cdf_sample(p, draws, rng), minlength=m)
    keep = (a + b) > 0
    assert stats.chi2_contingency(np.vstack([a[keep], b[keep]]))[1] > SIG
