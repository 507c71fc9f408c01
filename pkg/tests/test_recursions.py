import math
import warnings

import numpy as np
import pytest

from adaptcp import _backend, recursions
from adaptcp.errors import ConfigError
from adaptcp.models import (
    GaussianMean,
    GaussianPrecision,
    Geometric,
    NegativeBinomial,
    PoissonGamma,
    SegmentScorer,
    build_cache,
    gap_tables,
    log_marginal,
)
from adaptcp.recursions import (
    compute_recursions,
    count_distribution,
    map_segmentation,
    simulate_posterior,
    transition_logprobs,
)

import oracles

BACKENDS = ["python"] + (["compiled"] if _backend.COMPILED else [])


def _instance(name, n, seed):
    rng = np.random.default_rng(seed)
    if name == "poisson":
        y = rng.poisson(np.repeat(rng.uniform(0.5, 8.0, 3), -(-n // 3))[:n])
        params = {"alpha": 1.5, "beta": 0.5}
        model = PoissonGamma(**params)
    elif name == "mean":
        y = np.repeat(rng.normal(0, 2, 3), -(-n // 3))[:n] + rng.normal(0, 1, n)
        params = {"m": 0.0, "sigma2": 1.0, "tau2": 4.0}
        model = GaussianMean(**params)
    else:
        y = rng.normal(0, np.repeat(rng.uniform(0.3, 3.0, 3), -(-n // 3))[:n])
        params = {"mu": 0.0, "alpha0": 2.0, "beta0": 1.5}
        model = GaussianPrecision(**params)
    return y, params, model


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_point_unroll(backend):
    model = PoissonGamma(1.0, 1.0)
    prior = Geometric(0.3)
    c = build_cache([2, 5], model)
    table = compute_recursions(c, model, prior, backend=backend)
    p11, p22, p12 = (log_marginal(c, model, 1, 1), log_marginal(c, model, 2, 2), log_marginal(c, model, 1, 2))
    assert table.log_Q[2] == pytest.approx(p22, abs=1e-13)
    expected = math.log(0.3 * math.exp(p11 + p22) + math.exp(p12) * 0.7)
    assert table.log_Q[1] == pytest.approx(expected, abs=1e-13)
    assert table.log_Q[3] == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("name", ["poisson", "mean", "precision"])
@pytest.mark.parametrize("n", [8, 10])
def test_evidence_matches_enumeration(backend, name, n):
    for seed in range(2):
        y, params, model = _instance(name, n, seed)
        for prior, tabs in ((Geometric(0.2), oracles.geometric_tables(0.2)),
                            (NegativeBinomial(2, 0.3), oracles.negbin_tables(2, 0.3))):
            table = compute_recursions(build_cache(y, model), model, prior, backend=backend)
            _, log_z = oracles.enumerate_posterior(y, name, params, tabs)
            assert math.exp(table.log_evidence - log_z) == pytest.approx(1.0, abs=1e-9)


def test_transition_matches_enumeration():
    y, params, model = _instance("mean", 9, 3)
    prior = Geometric(0.25)
    sc = SegmentScorer(build_cache(y, model), model, prior)
    table = compute_recursions(sc.cache, model, prior, scorer=sc)
    logs, _ = oracles.enumerate_posterior(y, "mean", params, oracles.geometric_tables(0.25))
    probs = oracles.posterior_probs(logs)
    n = 9
    configs = list(oracles.all_configurations(n))
    for tau_prev in range(0, n - 1):
        given = [(c, pos) for c, pos in configs if tau_prev == 0 or tau_prev in pos]
        mass = sum(probs[c] for c, _ in given)
        ref = np.zeros(n - tau_prev)
        for c, pos in given:
            later = [p for p in pos if p > tau_prev]
            ref[later[0] - tau_prev - 1 if later else -1] += probs[c] / mass
        got = np.exp(transition_logprobs(table, tau_prev=tau_prev, scorer=sc))
        np.testing.assert_allclose(got, ref, atol=1e-9)


def test_transition_last_step_and_range():
    y, _, model = _instance("poisson", 12, 1)
    prior = Geometric(0.2)
    sc = SegmentScorer(build_cache(y, model), model, prior)
    table = compute_recursions(sc.cache, model, prior, scorer=sc)
    lp = transition_logprobs(table, tau_prev=10, scorer=sc)
    assert lp.size == 2
    assert math.exp(lp[0]) + math.exp(lp[1]) == pytest.approx(1.0, abs=1e-14)
    for bad in (-1, 11):
        with pytest.raises(ConfigError):
            transition_logprobs(table, tau_prev=bad, scorer=sc)


def test_transition_normalisation_random():
    rng = np.random.default_rng(0)
    for _ in range(5):
        n = int(rng.integers(20, 201))
        y = rng.normal(0, 1, n) + np.repeat(rng.normal(0, 3, 4), -(-n // 4))[:n]
        model = GaussianMean(0.0, 1.0, 9.0)
        prior = NegativeBinomial(2, 0.05)
        sc = SegmentScorer(build_cache(y, model), model, prior)
        table = compute_recursions(sc.cache, model, prior, scorer=sc)
        for tau_prev in rng.integers(0, n - 1, 10):
            lp = transition_logprobs(table, tau_prev=int(tau_prev), scorer=sc)
            assert math.fsum(np.exp(lp).tolist()) == pytest.approx(1.0, abs=1e-12)


def _n500():
    rng = np.random.default_rng(500)
    n = 500
    y = np.repeat(rng.normal(0, 2, 6), -(-n // 6))[:n] + rng.normal(0, 1, n)
    model = GaussianMean(0.0, 1.0, 4.0)
    prior = Geometric(0.01)
    return SegmentScorer(build_cache(y, model), model, prior)


@pytest.mark.parametrize("backend", BACKENDS)
def test_truncation_close_to_exact(backend):
    sc = _n500()
    exact = compute_recursions(sc.cache, sc.model, sc.prior, scorer=sc, backend=backend)
    trunc = compute_recursions(sc.cache, sc.model, sc.prior, 1e-10, scorer=sc, backend=backend)
    assert abs(trunc.log_evidence - exact.log_evidence) <= 1e-6
    assert exact.truncated_counts.sum() == 0
    assert trunc.truncated_counts.sum() > 0
    assert np.all(trunc.truncated_counts[1:sc.n + 1] <= sc.n - np.arange(1, sc.n + 1))


def test_truncation_monotone():
    sc = _n500()
    exact = compute_recursions(sc.cache, sc.model, sc.prior, scorer=sc).log_evidence
    errs = [abs(compute_recursions(sc.cache, sc.model, sc.prior, thr, scorer=sc).log_evidence - exact)
            for thr in (1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_backends_agree():
    if not _backend.COMPILED:
        pytest.skip("compiled core not built")
    sc = _n500()
    for thr in (0.0, 1e-8):
        a = compute_recursions(sc.cache, sc.model, sc.prior, thr, scorer=sc, backend="compiled")
        b = compute_recursions(sc.cache, sc.model, sc.prior, thr, scorer=sc, backend="python")
        np.testing.assert_allclose(a.log_Q[1:], b.log_Q[1:], rtol=1e-12, atol=1e-9)
        assert np.array_equal(a.truncated_counts, b.truncated_counts)
        assert map_segmentation(scorer=sc, backend="compiled") == map_segmentation(scorer=sc, backend="python")


def test_invalid_threshold():
    sc = _n500()
    with pytest.raises(ConfigError):
        compute_recursions(sc.cache, sc.model, sc.prior, -1.0, scorer=sc)


def test_large_n_warning(monkeypatch):
    monkeypatch.setattr(recursions, "LARGE_N_WARNING", 50)
    sc = _n500()
    with pytest.warns(RuntimeWarning, match="adaptive sampler"):
        compute_recursions(sc.cache, sc.model, sc.prior, scorer=sc)
    monkeypatch.setattr(recursions, "LARGE_N_WARNING", 10_000)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compute_recursions(sc.cache, sc.model, sc.prior, scorer=sc)


def test_degenerate_posterior_simulation():
    model = GaussianMean(0.0, 1.0, 1.0)
    prior = Geometric(1e-6)
    sc = SegmentScorer(build_cache(np.zeros(30), model), model, prior)
    table = compute_recursions(sc.cache, model, prior, scorer=sc)
    samples = simulate_posterior(table, n_samples=10_000, rng=np.random.default_rng(0), scorer=sc)
    assert (samples.counts() == 0).mean() > 0.999


def test_simulation_matches_enumeration():
    y, params, model = _instance("poisson", 10, 4)
    prior = Geometric(0.2)
    sc = SegmentScorer(build_cache(y, model), model, prior)
    table = compute_recursions(sc.cache, model, prior, scorer=sc)
    samples = simulate_posterior(table, n_samples=400_000, rng=np.random.default_rng(1), scorer=sc)
    logs, _ = oracles.enumerate_posterior(y, "poisson", params, oracles.geometric_tables(0.2))
    emp = np.bincount(samples.codes(), minlength=1 << 9) / len(samples)
    assert oracles.tv(emp, oracles.posterior_probs(logs)) <= 0.01
    summary = samples.summary(track_states=True)
    assert summary.n_samples == 400_000
    np.testing.assert_allclose(summary.state_distribution(), emp)
    for s in (0, 17, 399_999):
        pos = samples[s]
        assert pos == sorted(pos) and all(1 <= p <= 9 for p in pos)


def test_count_distribution_exact():
    y, params, model = _instance("mean", 10, 6)
    prior = NegativeBinomial(2, 0.3)
    sc = SegmentScorer(build_cache(y, model), model, prior)
    table = compute_recursions(sc.cache, model, prior, scorer=sc)
    logs, _ = oracles.enumerate_posterior(y, "mean", params, oracles.negbin_tables(2, 0.3))
    ref = oracles.count_marginal(oracles.posterior_probs(logs), 10)
    np.testing.assert_allclose(count_distribution(table, scorer=sc), ref, atol=1e-10)


def test_map_matches_enumeration():
    for seed in range(3):
        y, params, model = _instance("precision", 10, seed)
        prior = Geometric(0.15)
        sc = SegmentScorer(build_cache(y, model), model, prior)
        logs, _ = oracles.enumerate_posterior(y, "precision", params, oracles.geometric_tables(0.15))
        best, pos = map_segmentation(scorer=sc)
        code = int(np.argmax(logs))
        assert best == pytest.approx(logs[code], abs=1e-8)
        assert sc.log_posterior(pos) == pytest.approx(best, abs=1e-9)


def test_gap_tables_consistent_with_evidence_boundary():
    # Q(n) is the last observation on its own with nothing left to survive
    y, _, model = _instance("poisson", 12, 9)
    prior = NegativeBinomial(3, 0.4)
    sc = SegmentScorer(build_cache(y, model), model, prior)
    table = compute_recursions(sc.cache, model, prior, scorer=sc)
    tabs = gap_tables(prior, 12)
    assert table.log_Q[12] == pytest.approx(log_marginal(sc.cache, model, 12, 12) + tabs.survivor[0])
    assert np.all(np.isfinite(table.log_Q[1:]))
