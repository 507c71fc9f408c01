"""Exact backward recursions and perfect simulation from the changepoint posterior.

``Q(t)`` is the probability of ``y[t..n]`` given a changepoint at ``t - 1``.
It satisfies

    Q(t) = sum_{i=t}^{n-1} g(i - t + 1) P(t, i) Q(i + 1) + P(t, n) S(n - t),

with the first-gap distribution used when ``t = 1`` and ``S`` the survivor
of the gap prior, so ``Q(1)`` is the model evidence. Everything is kept on
the log scale and every sum is formed from its complete term vector with a
max-shifted, compensated log-sum-exp.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _backend
from .diagnostics import PosteriorSummary
from .errors import ConfigError, SamplingError
from .models import GapPrior, SegmentModel, SegmentScorer, SeriesCache, kernel_params
from .weighted_sampling import carpenter_sample

LARGE_N_WARNING = 100_000
SUGGESTED_TRUNCATION = 1e-10


@dataclass(frozen=True)
class FilterTable:
    """Backward quantities for one (data, model, prior) triple.

    Attributes:
        log_Q: log Q(t) at index t for t = 1..n+1; ``log_Q[n + 1] = 0`` and
            index 0 is unused.
        truncation_threshold: 0 for the exact recursion.
        truncated_counts: at index t, how many candidate next changepoints
            the truncated sum for Q(t) dropped.
    """

    n: int
    log_Q: np.ndarray
    truncation_threshold: float
    truncated_counts: np.ndarray

    @property
    def log_evidence(self) -> float:
        return float(self.log_Q[1])

    def kept_until(self, t: int) -> int:
        """Last candidate next changepoint retained in the sum for Q(t)."""
        return self.n - 1 - int(self.truncated_counts[t])


def _scorer(cache, model, prior, scorer):
    return scorer if scorer is not None else SegmentScorer(cache, model, prior)


def _kernel_args(scorer: SegmentScorer):
    kind, consts, length = kernel_params(scorer.cache, scorer.model)
    cache = scorer.cache
    tabs = scorer.tables
    plf = cache.prefix_logfact if cache.prefix_logfact is not None else np.zeros(1)
    arrays = (cache.prefix_sum, cache.prefix_sumsq, plf, tabs.first_gap, tabs.gap, tabs.first_survivor, tabs.survivor)
    return (kind, consts, length) + tuple(np.ascontiguousarray(a) for a in arrays)


def _log_sum(terms: np.ndarray) -> float:
    mx = float(np.max(terms))
    if mx == -math.inf:
        return -math.inf
    return mx + math.log(math.fsum(np.exp(terms - mx).tolist()))


def _backward_python(scorer: SegmentScorer, threshold: float):
    n = scorer.n
    log_q = np.full(n + 2, -np.inf)
    log_q[n + 1] = 0.0
    dropped = np.zeros(n + 2, dtype=np.int64)
    log_thr = math.log(threshold) if threshold > 0 else -math.inf
    for t in range(n, 0, -1):
        bs = np.arange(t, n)
        terms = scorer.seg_many(t - 1, bs) + log_q[t + 1:n + 1]
        if threshold > 0 and terms.size > 1:
            running = np.logaddexp.accumulate(terms)[:-1]
            with np.errstate(invalid="ignore"):
                fail = np.flatnonzero((terms[1:] - running < log_thr) & np.isfinite(running))
            if fail.size:
                stop = int(fail[0]) + 1
                dropped[t] = terms.size - stop - 1
                terms = terms[:stop + 1]
        log_q[t] = _log_sum(np.append(terms, scorer.seg(t - 1, n)))
    return log_q, dropped


def compute_recursions(cache: SeriesCache, model: SegmentModel, prior: GapPrior,
                       truncation_threshold: float = 0.0, *, scorer: SegmentScorer | None = None,
                       backend: str = "auto") -> FilterTable:
    """Fill log Q(t) backwards from t = n to 1.

    With ``truncation_threshold > 0`` the inner sum for each t scans the
    candidates i = t, t+1, ... in order and stops after the first term that
    would raise the running sum by a relative amount below the threshold.
    That term is kept, the remainder dropped. 1e-10 is a sensible choice.
    """
    if not (truncation_threshold >= 0 and math.isfinite(truncation_threshold)):
        raise ConfigError(f"truncation_threshold must be >= 0, got {truncation_threshold}")
    scorer = _scorer(cache, model, prior, scorer)
    n = scorer.n
    if n > LARGE_N_WARNING:
        warnings.warn(
            f"exact recursions on n={n} observations are O(n^2) and numerically fragile; "
            "the adaptive sampler is recommended at this size",
            RuntimeWarning,
            stacklevel=2,
        )
    if _backend.use_compiled(backend):
        log_q, dropped = _backend.core().backward_recursion(*_kernel_args(scorer), float(truncation_threshold))
    else:
        log_q, dropped = _backward_python(scorer, float(truncation_threshold))
    if not np.all(np.isfinite(log_q[1:])):
        raise SamplingError("backward recursion produced a non-finite log Q")
    log_q.setflags(write=False)
    dropped.setflags(write=False)
    return FilterTable(n, log_q, float(truncation_threshold), dropped)


def transition_logprobs(table: FilterTable, cache: SeriesCache | None = None, model: SegmentModel | None = None,
                        prior: GapPrior | None = None, tau_prev: int = 0, *,
                        scorer: SegmentScorer | None = None) -> np.ndarray:
    """Normalised log distribution of the next changepoint after ``tau_prev``.

    Entry ``j`` is the probability that the next changepoint is
    ``tau_prev + 1 + j``; the final entry is the probability that there is
    none. Candidates dropped by a truncated table get -inf.
    """
    scorer = _scorer(cache, model, prior, scorer)
    n = table.n
    if not 0 <= tau_prev <= n - 2:
        raise ConfigError(f"tau_prev must lie in 0..{n - 2}, got {tau_prev}")
    t = tau_prev + 1
    taus = np.arange(t, n)
    out = np.empty(taus.size + 1)
    out[:-1] = scorer.seg_many(tau_prev, taus) + table.log_Q[t + 1:n + 1]
    out[-1] = scorer.seg(tau_prev, n)
    keep = table.kept_until(t)
    if keep < n - 1:
        out[keep - tau_prev:-1] = -np.inf
    return out - logsumexp(out)


class PosteriorSamples:
    """Ragged collection of sampled changepoint configurations.

    Sample ``s`` is ``positions[offsets[s]:offsets[s + 1]]``, sorted.
    """

    def __init__(self, n: int, offsets: np.ndarray, positions: np.ndarray):
        self.n = n
        self.offsets = offsets
        self.positions = positions

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, s: int) -> list[int]:
        return self.positions[self.offsets[s]:self.offsets[s + 1]].tolist()

    def to_lists(self) -> list[list[int]]:
        return [self[s] for s in range(len(self))]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def count_hist(self) -> np.ndarray:
        return np.bincount(self.counts(), minlength=self.n)[: self.n] / len(self)

    def codes(self) -> np.ndarray:
        """Bit code of each configuration (only for n - 1 <= 62)."""
        if self.n - 1 > 62:
            raise ConfigError("bit codes need n - 1 <= 62")
        owner = np.repeat(np.arange(len(self)), self.counts())
        out = np.zeros(len(self), dtype=np.int64)
        np.add.at(out, owner, np.left_shift(np.int64(1), self.positions - 1))
        return out

    def summary(self, track_states: bool = False) -> PosteriorSummary:
        n = self.n
        state_counts = None
        if track_states:
            state_counts = np.bincount(self.codes(), minlength=1 << (n - 1)).astype(np.int64)
        return PosteriorSummary(
            n=n,
            count_counts=np.bincount(self.counts(), minlength=n)[:n].astype(np.int64),
            inclusion_counts=np.bincount(self.positions, minlength=n + 1).astype(np.int64),
            n_samples=len(self),
            state_counts=state_counts,
        )


def simulate_posterior(table: FilterTable, cache: SeriesCache | None = None, model: SegmentModel | None = None,
                       prior: GapPrior | None = None, n_samples: int = 1, rng: np.random.Generator | None = None, *,
                       scorer: SegmentScorer | None = None) -> PosteriorSamples:
    """Independent draws from the changepoint posterior.

    Samples are grouped by their most recent changepoint: all samples
    sitting at ``t`` share one transition distribution, from which their
    next changepoints are drawn together with Carpenter's sampler and then
    randomly permuted among them.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    scorer = _scorer(cache, model, prior, scorer)
    rng = rng if rng is not None else np.random.default_rng()
    n = table.n
    pending: dict[int, list[np.ndarray]] = {0: [np.arange(n_samples, dtype=np.int64)]}
    owners: list[np.ndarray] = []
    taus: list[np.ndarray] = []
    for tau_prev in range(0, n - 1):
        groups = pending.pop(tau_prev, None)
        if not groups:
            continue
        ids = groups[0] if len(groups) == 1 else np.concatenate(groups)
        log_p = transition_logprobs(table, tau_prev=tau_prev, scorer=scorer)
        draws = carpenter_sample(log_p, ids.size, rng)
        draws = draws[rng.permutation(ids.size)]
        moving = draws < log_p.size - 1
        nxt = tau_prev + 1 + draws[moving]
        ids = ids[moving]
        if ids.size == 0:
            continue
        owners.append(ids)
        taus.append(nxt)
        order = np.argsort(nxt, kind="stable")
        nxt_sorted = nxt[order]
        ids_sorted = ids[order]
        bounds = np.flatnonzero(np.diff(nxt_sorted)) + 1
        for chunk_ids, chunk_tau in zip(np.split(ids_sorted, bounds), np.split(nxt_sorted, bounds)):
            tau = int(chunk_tau[0])
            if tau <= n - 2:
                pending.setdefault(tau, []).append(chunk_ids)
    if owners:
        owner = np.concatenate(owners)
        pos = np.concatenate(taus)
        order = np.lexsort((pos, owner))
        owner = owner[order]
        pos = pos[order]
    else:
        owner = np.zeros(0, dtype=np.int64)
        pos = np.zeros(0, dtype=np.int64)
    offsets = np.zeros(n_samples + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner, minlength=n_samples), out=offsets[1:])
    return PosteriorSamples(n, offsets, pos.astype(np.int64))


def count_distribution(table: FilterTable, cache: SeriesCache | None = None, model: SegmentModel | None = None,
                       prior: GapPrior | None = None, *, scorer: SegmentScorer | None = None,
                       max_count: int = 256) -> np.ndarray:
    """Exact posterior of the number of changepoints implied by ``table``.

    Forward pass over (last changepoint, changepoints so far), O(n^2 *
    max_count). Mass beyond ``max_count`` (default 256) is dropped and
    reported in a RuntimeWarning.
    """
    scorer = _scorer(cache, model, prior, scorer)
    n = table.n
    kmax = min(int(max_count), n - 1)
    reach = np.zeros((n, kmax + 1))
    reach[0, 0] = 1.0
    out = np.zeros(n)
    lost = 0.0
    for tau_prev in range(0, n):
        row = reach[tau_prev]
        if not row.any():
            continue
        if tau_prev == n - 1:
            out[: kmax + 1] += row
            continue
        probs = np.exp(transition_logprobs(table, tau_prev=tau_prev, scorer=scorer))
        out[: kmax + 1] += probs[-1] * row
        lost += probs[:-1].sum() * row[kmax]
        reach[tau_prev + 1:n, 1:] += np.outer(probs[:-1], row[:-1])
    if lost > 1e-12:
        warnings.warn(f"count distribution truncated at {kmax}: {lost:.3g} mass dropped", RuntimeWarning, stacklevel=2)
    return out


def map_segmentation(cache: SeriesCache | None = None, model: SegmentModel | None = None,
                     prior: GapPrior | None = None, *, scorer: SegmentScorer | None = None,
                     backend: str = "auto") -> tuple[float, list[int]]:
    """Exact maximum a posteriori configuration (max-product form of the recursion)."""
    scorer = _scorer(cache, model, prior, scorer)
    n = scorer.n
    if _backend.use_compiled(backend):
        best, nxt = _backend.core().map_recursion(*_kernel_args(scorer))
    else:
        best = np.full(n + 2, -np.inf)
        best[n + 1] = 0.0
        nxt = np.zeros(n + 2, dtype=np.int64)
        for t in range(n, 0, -1):
            # boundary first so ties resolve as in the compiled kernel
            vals = np.append(scorer.seg(t - 1, n), scorer.seg_many(t - 1, np.arange(t, n)) + best[t + 1:n + 1])
            j = int(np.argmax(vals))
            best[t] = vals[j]
            nxt[t] = n if j == 0 else t + j - 1
    positions = []
    t = 1
    while True:
        i = int(nxt[t])
        if i >= n:
            break
        positions.append(i)
        t = i + 1
    return float(best[1]), positions
