"""Conjugate segment evidences and changepoint gap priors.

Everything here lives on the natural-log scale. A :class:`SeriesCache` holds
prefix sums so the evidence of any segment ``y[a..b]`` (1-based, inclusive)
costs O(1), and :class:`SegmentScorer` combines evidences with the gap prior
into the per-segment terms that make up the collapsed log posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError, DataError, ModelMismatchError, SegmentIndexError, StateError

LOG_2PI = math.log(2.0 * math.pi)

POISSON_GAMMA = 0
GAUSSIAN_MEAN = 1
GAUSSIAN_PRECISION = 2


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not (math.isfinite(value) and value > 0):
            raise ConfigError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class PoissonGamma:
    """Poisson counts with a Gamma(alpha, beta) prior on the rate (beta is a rate)."""

    alpha: float = 1.0
    beta: float = 1.0

    kind = POISSON_GAMMA

    def __post_init__(self):
        _require_positive(alpha=self.alpha, beta=self.beta)

    @property
    def shift(self) -> float:
        return 0.0

    @property
    def log_norm(self) -> float:
        return self.alpha * math.log(self.beta) - math.lgamma(self.alpha)


@dataclass(frozen=True)
class GaussianMean:
    """N(mu_j, sigma2) observations with mu_j ~ N(m, tau2 * sigma2).

    Note that ``tau2`` scales the observation variance: the prior variance of
    a segment mean is ``tau2 * sigma2``.
    """

    m: float = 0.0
    sigma2: float = 1.0
    tau2: float = 1.0

    kind = GAUSSIAN_MEAN

    def __post_init__(self):
        if not math.isfinite(self.m):
            raise ConfigError(f"m must be finite, got {self.m!r}")
        _require_positive(sigma2=self.sigma2, tau2=self.tau2)

    @property
    def shift(self) -> float:
        return float(self.m)

    @property
    def log_2pi_sigma2(self) -> float:
        return math.log(2.0 * math.pi * self.sigma2)

    def length_term(self, k: float) -> float:
        return -0.5 * k * self.log_2pi_sigma2 - 0.5 * math.log(k * self.tau2 + 1.0)


@dataclass(frozen=True)
class GaussianPrecision:
    """N(mu, 1/lambda) observations with known mu and lambda ~ Gamma(alpha0, beta0)."""

    mu: float = 0.0
    alpha0: float = 1.0
    beta0: float = 1.0

    kind = GAUSSIAN_PRECISION

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ConfigError(f"mu must be finite, got {self.mu!r}")
        _require_positive(alpha0=self.alpha0, beta0=self.beta0)

    @property
    def shift(self) -> float:
        return float(self.mu)

    def length_term(self, k: float) -> float:
        return (
            -0.5 * k * LOG_2PI
            + math.lgamma(0.5 * k + self.alpha0)
            - math.lgamma(self.alpha0)
            + self.alpha0 * math.log(self.beta0)
        )


SegmentModel = Union[PoissonGamma, GaussianMean, GaussianPrecision]


@dataclass(frozen=True)
class SeriesCache:
    """Observations plus prefix statistics.

    ``prefix_sum`` and ``prefix_sumsq`` accumulate ``y - shift`` where
    ``shift`` is the model's location hyperparameter (0 for Poisson data);
    this keeps the Gaussian evidences free of cancellation for data far
    from zero. ``prefix_logfact`` is only present for count data.
    """

    n: int
    y: np.ndarray
    prefix_sum: np.ndarray
    prefix_sumsq: np.ndarray
    prefix_logfact: np.ndarray | None = None
    shift: float = 0.0


def build_cache(y: Sequence[float], model: SegmentModel) -> SeriesCache:
    """Validate ``y`` against ``model`` and precompute prefix statistics in O(n)."""
    arr = np.array(y, dtype=np.float64).ravel()
    n = arr.size
    if n < 2:
        raise DataError(f"need at least 2 observations, got {n}")
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise DataError(f"observation {bad[0] + 1} is not finite ({float(arr[bad[0]])!r})")

    logfact = None
    if model.kind == POISSON_GAMMA:
        if np.any(arr < 0) or np.any(arr != np.floor(arr)):
            idx = int(np.flatnonzero((arr < 0) | (arr != np.floor(arr)))[0])
            raise ModelMismatchError(
                f"PoissonGamma needs non-negative integer data; observation {idx + 1} is {float(arr[idx])!r}"
            )
        logfact = np.concatenate(([0.0], np.cumsum(gammaln(arr + 1.0))))

    shift = model.shift
    centered = arr - shift if shift != 0.0 else arr
    prefix_sum = np.concatenate(([0.0], np.cumsum(centered)))
    prefix_sumsq = np.concatenate(([0.0], np.cumsum(centered * centered)))
    arr.setflags(write=False)
    for a in (prefix_sum, prefix_sumsq, logfact):
        if a is not None:
            a.setflags(write=False)
    return SeriesCache(n, arr, prefix_sum, prefix_sumsq, logfact, shift)


def _check_segment(cache: SeriesCache, a: int, b: int) -> None:
    if not (1 <= a <= b <= cache.n):
        raise SegmentIndexError(f"segment ({a}, {b}) invalid for n={cache.n}")


def _log_marginal(cache: SeriesCache, model: SegmentModel, a: int, b: int) -> float:
    kk = float(b - a + 1)
    s1 = cache.prefix_sum[b] - cache.prefix_sum[a - 1]
    kind = model.kind
    if kind == POISSON_GAMMA:
        f = cache.prefix_logfact[b] - cache.prefix_logfact[a - 1]
        return (
            model.log_norm - f + math.lgamma(s1 + model.alpha) - (s1 + model.alpha) * math.log(kk + model.beta)
        )
    s2 = cache.prefix_sumsq[b] - cache.prefix_sumsq[a - 1]
    if kind == GAUSSIAN_MEAN:
        dev = s1 / kk
        ss = s2 - s1 * dev
        if ss < 0.0:
            ss = 0.0
        q = ss + kk / (kk * model.tau2 + 1.0) * dev * dev
        return model.length_term(kk) - q / (2.0 * model.sigma2)
    if s2 < 0.0:
        s2 = 0.0
    return model.length_term(kk) - (model.alpha0 + 0.5 * kk) * math.log(model.beta0 + 0.5 * s2)


def log_marginal(cache: SeriesCache, model: SegmentModel, a: int, b: int) -> float:
    """Log evidence of the segment ``y[a..b]`` (1-based, inclusive)."""
    _check_segment(cache, a, b)
    return _log_marginal(cache, model, a, b)


def log_marginal_many(cache: SeriesCache, model: SegmentModel, a: int, b: np.ndarray) -> np.ndarray:
    """Vectorised :func:`log_marginal` for a fixed start ``a`` and many ends ``b``."""
    b = np.asarray(b, dtype=np.int64)
    kk = (b - a + 1).astype(np.float64)
    s1 = cache.prefix_sum[b] - cache.prefix_sum[a - 1]
    kind = model.kind
    if kind == POISSON_GAMMA:
        f = cache.prefix_logfact[b] - cache.prefix_logfact[a - 1]
        return model.log_norm - f + gammaln(s1 + model.alpha) - (s1 + model.alpha) * np.log(kk + model.beta)
    s2 = cache.prefix_sumsq[b] - cache.prefix_sumsq[a - 1]
    if kind == GAUSSIAN_MEAN:
        dev = s1 / kk
        ss = np.maximum(s2 - s1 * dev, 0.0)
        q = ss + kk / (kk * model.tau2 + 1.0) * dev * dev
        length = -0.5 * kk * model.log_2pi_sigma2 - 0.5 * np.log(kk * model.tau2 + 1.0)
        return length - q / (2.0 * model.sigma2)
    s2 = np.maximum(s2, 0.0)
    length = (
        -0.5 * kk * LOG_2PI
        + gammaln(0.5 * kk + model.alpha0)
        - math.lgamma(model.alpha0)
        + model.alpha0 * math.log(model.beta0)
    )
    return length - (model.alpha0 + 0.5 * kk) * np.log(model.beta0 + 0.5 * s2)


# --------------------------------------------------------------------------
# gap priors


@dataclass(frozen=True)
class GapTables:
    """Log gap masses and survivors tabulated for t = 0..n.

    ``first_*`` apply to the distance from the series start to the first
    changepoint, the others to gaps between successive changepoints.
    Survivors are P(gap > m).
    """

    first_gap: np.ndarray
    gap: np.ndarray
    first_survivor: np.ndarray
    survivor: np.ndarray


@dataclass(frozen=True)
class Geometric:
    """Geometric gaps, g(t) = p (1-p)^(t-1) for t >= 1."""

    p: float

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ConfigError(f"p must lie in (0, 1), got {self.p!r}")

    def log_gap(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = math.log(self.p) + (t - 1.0) * math.log1p(-self.p)
        return np.where(t >= 1, out, -np.inf)

    log_first_gap = log_gap

    def log_survivor(self, m):
        m = np.asarray(m, dtype=np.float64)
        return np.maximum(m, 0.0) * math.log1p(-self.p)

    log_first_survivor = log_survivor


@dataclass(frozen=True)
class NegativeBinomial:
    """Gaps counting trials to the ``k``-th success; the first gap is Geometric(p)."""

    k: int
    p: float

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ConfigError(f"p must lie in (0, 1), got {self.p!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k!r}")

    def log_gap(self, t):
        t = np.asarray(t, dtype=np.float64)
        k = float(self.k)
        safe = np.maximum(t, k)
        out = (
            gammaln(safe)
            - gammaln(k)
            - gammaln(safe - k + 1.0)
            + k * math.log(self.p)
            + (safe - k) * math.log1p(-self.p)
        )
        return np.where(t >= k, out, -np.inf)

    def log_first_gap(self, t):
        return Geometric(self.p).log_gap(t)

    def log_survivor(self, m):
        # P(gap > m) = P(Binomial(m, p) < k)
        m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
        j = np.arange(self.k, dtype=np.float64).reshape((-1,) + (1,) * m.ndim)
        terms = (
            gammaln(m + 1.0)
            - gammaln(j + 1.0)
            - gammaln(np.maximum(m - j, 0.0) + 1.0)
            + j * math.log(self.p)
            + (m - j) * math.log1p(-self.p)
        )
        terms = np.where(j <= m, terms, -np.inf)
        return np.minimum(logsumexp(terms, axis=0), 0.0)

    def log_first_survivor(self, m):
        return Geometric(self.p).log_survivor(m)


GapPrior = Union[Geometric, NegativeBinomial]


def log_gap(prior: GapPrior, t: int) -> float:
    """log g(t) for a gap of ``t`` between successive changepoints."""
    if t < 1:
        raise ConfigError(f"gap length must be >= 1, got {t}")
    return float(prior.log_gap(t))


def gap_tables(prior: GapPrior, n: int) -> GapTables:
    t = np.arange(n + 1, dtype=np.float64)
    tabs = [
        np.asarray(prior.log_first_gap(t), dtype=np.float64),
        np.asarray(prior.log_gap(t), dtype=np.float64),
        np.asarray(prior.log_first_survivor(t), dtype=np.float64),
        np.asarray(prior.log_survivor(t), dtype=np.float64),
    ]
    for tab in tabs:
        tab.setflags(write=False)
    return GapTables(*tabs)


def validate_positions(positions: Sequence[int], n: int) -> list[int]:
    pos = [int(p) for p in positions]
    prev = 0
    for p in pos:
        if p <= prev or p > n - 1:
            raise StateError(f"changepoints must be strictly increasing in 1..{n - 1}, got {pos}")
        prev = p
    return pos


def log_prior_z(prior: GapPrior, positions: Sequence[int], n: int) -> float:
    """Log prior of a changepoint configuration on ``n`` observations.

    A changepoint at ``i`` ends a segment at ``y_i``. The final factor is the
    probability that the gap following the last changepoint reaches past
    ``y_{n-1}``, which makes the prior sum to one over all 2^(n-1)
    configurations and matches the backward recursion's boundary term.
    """
    pos = validate_positions(positions, n)
    if not pos:
        return float(prior.log_first_survivor(n - 1))
    total = float(prior.log_first_gap(pos[0]))
    for prev, cur in zip(pos, pos[1:]):
        total += float(prior.log_gap(cur - prev))
    return total + float(prior.log_survivor(n - 1 - pos[-1]))


class SegmentScorer:
    """Per-segment posterior terms for a fixed (data, model, prior) triple.

    ``seg(a, b)`` is the log contribution of a segment ``y[a+1..b]`` whose
    left boundary is the changepoint ``a`` (0 for the series start) and whose
    right boundary is the changepoint ``b`` (``n`` for the series end): the
    segment evidence plus the matching gap-prior factor. The unnormalised
    log posterior of a configuration is the sum of ``seg`` over its segments.
    """

    def __init__(self, cache: SeriesCache, model: SegmentModel, prior: GapPrior):
        self.cache = cache
        self.model = model
        self.prior = prior
        self.n = cache.n
        self.tables = gap_tables(prior, cache.n)
        if model.kind == POISSON_GAMMA and cache.prefix_logfact is None:
            raise ModelMismatchError("cache was not built for a PoissonGamma model")
        if cache.shift != model.shift:
            raise ModelMismatchError("cache was built for a different model location")

    def link(self, a: int, b: int) -> float:
        n = self.n
        tabs = self.tables
        if b < n:
            return tabs.first_gap[b] if a == 0 else tabs.gap[b - a]
        return tabs.first_survivor[n - 1] if a == 0 else tabs.survivor[n - 1 - a]

    def seg(self, a: int, b: int) -> float:
        return self.link(a, b) + _log_marginal(self.cache, self.model, a + 1, b)

    def seg_many(self, a: int, bs: np.ndarray) -> np.ndarray:
        """``seg(a, b)`` for every ``b`` in ``bs``."""
        bs = np.asarray(bs, dtype=np.int64)
        n = self.n
        tabs = self.tables
        inner = bs < n
        if a == 0:
            link = np.where(inner, tabs.first_gap[np.minimum(bs, n)], tabs.first_survivor[n - 1])
        else:
            link = np.where(inner, tabs.gap[np.minimum(bs - a, n)], tabs.survivor[n - 1 - a])
        return link + log_marginal_many(self.cache, self.model, a + 1, bs)

    def log_posterior(self, positions: Sequence[int]) -> float:
        total = 0.0
        prev = 0
        for p in positions:
            total += self.seg(prev, p)
            prev = p
        return total + self.seg(prev, self.n)


# Poisson evidences read lgamma(S + alpha) from a table built with math.lgamma
# when the total count is at most this, so both backends agree exactly
MAX_LGAMMA_TABLE = 5_000_000


def kernel_params(cache: SeriesCache, model: SegmentModel) -> tuple[int, np.ndarray, np.ndarray]:
    """Model code, scalar constants and per-length constants for the compiled kernels.

    The constants are computed with the same expressions the pure-Python
    path uses, so both backends see bit-identical evidences. For Poisson
    data the table holds lgamma(j + alpha) for every attainable count sum j
    (the fourth constant flags whether it is present).
    """
    n = cache.n
    if model.kind == POISSON_GAMMA:
        total = int(cache.prefix_sum[-1])
        if total <= MAX_LGAMMA_TABLE:
            table = np.array([math.lgamma(j + model.alpha) for j in range(total + 1)])
            return model.kind, np.array([model.log_norm, model.alpha, model.beta, 1.0]), table
        return model.kind, np.array([model.log_norm, model.alpha, model.beta, 0.0]), np.zeros(1)
    if model.kind == GAUSSIAN_MEAN:
        consts = np.array([model.log_2pi_sigma2, model.tau2, 2.0 * model.sigma2, 0.0])
    else:
        consts = np.array([model.alpha0, model.beta0, 0.0, 0.0])
    length = np.array([model.length_term(float(k)) for k in range(n + 1)])
    return model.kind, consts, length
