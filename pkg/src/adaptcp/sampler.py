"""Adaptive Metropolis-Hastings sampler over changepoint configurations.

Each iteration proposes to add a changepoint (probability ``p_add``) or to
delete one, optionally followed by a local adjust move. Add and delete
positions are drawn from the adaptive selection weights; after an accepted
add or delete the weight of the touched position is nudged towards the
target acceptance rate by a step that shrinks like ``h * n / (t + 1)``.

The compiled kernel and the pure-Python loop below consume the random
stream identically and evaluate the same floating-point expressions, so a
given seed produces the same chain on either backend.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _backend
from .diagnostics import PosteriorSummary
from .errors import ConfigError, StateError
from .models import GapPrior, SegmentModel, SegmentScorer, SeriesCache, kernel_params
from .state import MAX_CODED_POSITIONS, ChangepointState
from .weighted_sampling import LOG_CEIL, LOG_FLOOR, SelectionWeights

MAX_RETAINED = 1_000_000
# configuration histograms are tracked by default up to this many positions
AUTO_TRACK_POSITIONS = 16
CLOCK_CHECK_MASK = (1 << 16) - 1


class MoveKind(enum.IntEnum):
    ADD = 0
    DELETE = 1
    ADJUST = 2


@dataclass
class SamplerConfig:
    """Sampler settings.

    ``burn_in`` defaults to half the iterations and ``thin`` to the smallest
    stride that retains at most a million samples. With ``time_budget`` set,
    ``iterations`` is only an upper bound, ``burn_in`` defaults to 0 and
    ``thin`` to 1. ``log_cutoff`` and ``log_a_inactive`` are the thresholding
    constants on the log scale (relative to the initial weight 1).
    """

    iterations: int = 1_000_000
    p_add: float = 0.5
    alpha_target: float = 0.15
    h: float = 0.001
    adjust_enabled: bool = True
    thresholding_enabled: bool = True
    dual_adaptation_enabled: bool = False
    dual_weight: float = 0.5
    adaptation_enabled: bool = True
    burn_in: int | None = None
    thin: int | None = None
    seed: int | None = 0
    time_budget: float | None = None
    log_cutoff: float = 1.0
    log_a_inactive: float = 0.0
    log_floor: float = LOG_FLOOR
    log_ceil: float = LOG_CEIL
    recompute_every: int = 1_000_000
    track_states: bool | None = None
    backend: str = "auto"

    def __post_init__(self):
        if isinstance(self.iterations, bool) or int(self.iterations) != self.iterations or self.iterations < 0:
            raise ConfigError(f"iterations must be a non-negative integer, got {self.iterations!r}")
        self.iterations = int(self.iterations)
        if not 0.0 < self.p_add < 1.0:
            raise ConfigError(f"p_add must lie in (0, 1), got {self.p_add}")
        if not 0.0 < self.alpha_target < 1.0:
            raise ConfigError(f"alpha_target must lie in (0, 1), got {self.alpha_target}")
        if not (math.isfinite(self.h) and self.h > 0):
            raise ConfigError(f"h must be positive, got {self.h}")
        if not 0.0 <= self.dual_weight <= 1.0:
            raise ConfigError(f"dual_weight must lie in [0, 1], got {self.dual_weight}")
        if not self.log_floor < self.log_a_inactive < self.log_cutoff <= self.log_ceil:
            raise ConfigError("need log_floor < log_a_inactive < log_cutoff <= log_ceil")
        if self.time_budget is not None and not self.time_budget > 0:
            raise ConfigError(f"time_budget must be positive, got {self.time_budget}")
        if self.recompute_every < 1:
            raise ConfigError("recompute_every must be >= 1")
        if self.burn_in is None:
            self.burn_in = 0 if self.time_budget else self.iterations // 2
        if self.burn_in < 0 or (self.iterations > 0 and self.burn_in >= self.iterations):
            raise ConfigError(f"burn_in must lie in [0, iterations), got {self.burn_in}")
        if self.thin is None:
            if self.time_budget:
                self.thin = 1
            else:
                self.thin = max(1, -(-(self.iterations - self.burn_in) // MAX_RETAINED))
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        _backend.use_compiled(self.backend)

    @property
    def log_prior_odds(self) -> float:
        """log((1 - p) / p): the proposal-choice factor in the add ratio."""
        return math.log(1.0 - self.p_add) - math.log(self.p_add)

    def derive(self, **changes) -> "SamplerConfig":
        return replace(self, **changes)


@dataclass
class MoveRecord:
    iteration: int
    move_kind: MoveKind
    position: int
    accepted: bool
    alpha_fwd: float
    alpha_rev: float = float("nan")
    delta: float = 0.0
    target: int = -1


@dataclass
class RunStats:
    """Per-run bookkeeping returned next to the summary."""

    backend: str
    iterations_done: int
    elapsed: float
    proposed: np.ndarray
    accepted: np.ndarray
    max_adapt_ratio: float
    log_weight_min: float
    log_weight_max: float
    max_drift: float
    rebuilds: int
    final_positions: list[int]
    final_log_post: float
    log_a: np.ndarray = field(repr=False)
    log_d: np.ndarray = field(repr=False)

    @property
    def acceptance_rates(self) -> dict[str, float]:
        return {
            kind.name.lower(): (float(self.accepted[kind]) / float(self.proposed[kind]) if self.proposed[kind] else 0.0)
            for kind in MoveKind
        }

    @property
    def iterations_per_second(self) -> float:
        return self.iterations_done / self.elapsed if self.elapsed > 0 else math.inf


@dataclass
class SamplerResult:
    summary: PosteriorSummary
    stats: RunStats

    def __iter__(self):
        return iter((self.summary, self.stats))


# --------------------------------------------------------------------------
# single moves (used by the pure-Python loop and exposed for testing)


def _alphas(lr: float) -> tuple[float, float]:
    return (1.0 if lr >= 0.0 else math.exp(lr)), (1.0 if lr <= 0.0 else math.exp(-lr))


def log_ratio_add(state: ChangepointState, i: int, scorer: SegmentScorer, w: SelectionWeights,
                  cfg: SamplerConfig) -> tuple[float, float]:
    """Log acceptance ratio of adding ``i`` and the log-posterior change it causes."""
    if state.z[i]:
        raise StateError(f"position {i} is already a changepoint")
    a, b = state.neighbors(i)
    delta = (scorer.seg(a, i) + scorer.seg(i, b)) - scorer.seg(a, b)
    log_fwd = w.hat_log_a(i) - math.log(w.add_mass())
    log_rev = w.log_d[i] - math.log(w.d_sum + w.d_w[i])
    return delta + cfg.log_prior_odds + log_rev - log_fwd, delta


def log_ratio_delete(state: ChangepointState, i: int, scorer: SegmentScorer, w: SelectionWeights,
                     cfg: SamplerConfig) -> tuple[float, float]:
    if not state.z[i]:
        raise StateError(f"position {i} is not a changepoint")
    a, b = state.neighbors(i)
    delta = scorer.seg(a, b) - (scorer.seg(a, i) + scorer.seg(i, b))
    log_fwd = w.log_d[i] - math.log(w.d_sum)
    log_rev = w.hat_log_a(i) - math.log(w.hat_a(i) + w.add_mass())
    return delta - cfg.log_prior_odds + log_rev - log_fwd, delta


def mh_ratio_add(state, i, scorer, w, cfg) -> float:
    """Acceptance probability min(1, ratio) for adding a changepoint at ``i``."""
    return _alphas(log_ratio_add(state, i, scorer, w, cfg)[0])[0]


def mh_ratio_delete(state, i, scorer, w, cfg) -> float:
    """Acceptance probability for deleting the changepoint at ``i``."""
    return _alphas(log_ratio_delete(state, i, scorer, w, cfg)[0])[0]


def adjust_move(state: ChangepointState, scorer: SegmentScorer, unif, iteration: int = 0,
                w: SelectionWeights | None = None) -> MoveRecord | None:
    """Move a uniformly chosen changepoint to a uniform spot between its neighbours.

    Returns None when there is no changepoint. The proposal is symmetric,
    so the acceptance ratio is the posterior ratio alone. ``w`` (if given)
    has its running sums updated when the move is accepted.
    """
    k = state.k
    if k == 0:
        return None
    pos = state.positions
    idx = int(unif() * k)
    i = pos[idx]
    a = pos[idx - 1] if idx > 0 else 0
    b = pos[idx + 1] if idx + 1 < k else state.n
    j = a + 1 + int(unif() * (b - a - 1))
    if j == i:
        return MoveRecord(iteration, MoveKind.ADJUST, i, True, 1.0, 1.0, 0.0, j)
    delta = (scorer.seg(a, j) + scorer.seg(j, b)) - (scorer.seg(a, i) + scorer.seg(i, b))
    alpha = 1.0 if delta >= 0.0 else math.exp(delta)
    accepted = unif() < alpha
    if accepted:
        if w is not None:
            w.on_move(i, j)
        state.move(i, j, delta)
    return MoveRecord(iteration, MoveKind.ADJUST, i, accepted, alpha, float("nan"), delta, j)


def adapt_weights(w: SelectionWeights, record: MoveRecord, t: int, n: int, cfg: SamplerConfig) -> float:
    """Nudge the selection weights after an accepted add or delete.

    Returns the largest |change| applied to a log weight divided by the step
    size ``h * n / (t + 1)``; it never exceeds max(alpha_target, 1 - alpha_target).
    """
    if not (record.accepted and cfg.adaptation_enabled) or record.move_kind == MoveKind.ADJUST:
        return 0.0
    s = cfg.h * n / (t + 1.0)
    at = cfg.alpha_target
    i = record.position
    af = record.alpha_fwd
    ratio = 0.0
    if cfg.dual_adaptation_enabled:
        ar = record.alpha_rev
        wd = cfg.dual_weight
        if record.move_kind == MoveKind.ADD:
            applied = w.shift_log_a(i, s * (af - at) * (1.0 - wd * af), True)
            if abs(applied) > ratio * s:
                ratio = abs(applied) / s
            applied = w.shift_log_d(i, s * (ar - at) * af, True)
        else:
            applied = w.shift_log_a(i, s * (ar - at) * af, False)
            if abs(applied) > ratio * s:
                ratio = abs(applied) / s
            applied = w.shift_log_d(i, s * (af - at) * (1.0 - wd * af), False)
    elif record.move_kind == MoveKind.ADD:
        applied = w.shift_log_a(i, s * (af - at), True)
    else:
        applied = w.shift_log_d(i, s * (af - at), False)
    if abs(applied) > ratio * s:
        ratio = abs(applied) / s
    bound = max(at, 1.0 - at) * (1.0 + 1e-12)
    assert ratio <= bound, f"adaptation step {ratio} exceeds the diminishing-adaptation bound {bound}"
    return ratio


# --------------------------------------------------------------------------
# chain drivers


def _chain_python(cfg: SamplerConfig, scorer: SegmentScorer, init: ChangepointState, rng_gen: np.random.Generator,
                  track: bool) -> dict:
    n = scorer.n
    unif = rng_gen.random
    state = init.copy()
    w = SelectionWeights(n, state, thresholding=cfg.thresholding_enabled, log_cutoff=cfg.log_cutoff,
                         log_a_inactive=cfg.log_a_inactive, log_floor=cfg.log_floor, log_ceil=cfg.log_ceil)
    rebuilds = 0
    count_hist = np.zeros(n, dtype=np.int64)
    incl = np.zeros(n + 1, dtype=np.int64)
    since = np.zeros(n + 1, dtype=np.int64)
    state_hist = np.zeros(1 << (n - 1), dtype=np.int64) if track else None
    proposed = [0, 0, 0]
    accepted_n = [0, 0, 0]
    best = state.log_post
    map_pos = list(state.positions)
    trace_iter, trace_time, trace_lp = [0], [0.0], [best]
    ns = 0
    accepted_moves = 0
    max_ratio = 0.0
    wmin, wmax = math.inf, -math.inf
    max_drift = 0.0
    done = 0
    iterations, burn_in, thin = cfg.iterations, cfg.burn_in, cfg.thin
    budget = cfg.time_budget or 0.0
    m = n - 1
    t0 = time.perf_counter()

    for t in range(iterations):
        if budget > 0.0 and t > 0 and (t & CLOCK_CHECK_MASK) == 0 and time.perf_counter() - t0 >= budget:
            break
        record = None
        improved = False
        if unif() < cfg.p_add:
            proposed[0] += 1
            if state.k < m:
                if w.stale:
                    rebuilds += 1
                i = w.draw_add(state, unif)
                lr, delta = log_ratio_add(state, i, scorer, w, cfg)
                af, ar = _alphas(lr)
                if unif() < af:
                    accepted_n[0] += 1
                    w.on_toggle(i, True)
                    state.toggle(i, delta)
                    since[i] = ns
                    record = MoveRecord(t, MoveKind.ADD, i, True, af, ar, delta)
        else:
            proposed[1] += 1
            if state.k > 0:
                i, log_dsum = w.draw_delete(state, unif)
                a, b = state.neighbors(i)
                delta = scorer.seg(a, b) - (scorer.seg(a, i) + scorer.seg(i, b))
                lfwd = w.log_d[i] - log_dsum
                lrev = w.hat_log_a(i) - math.log(w.hat_a(i) + w.add_mass())
                lr = delta - cfg.log_prior_odds + lrev - lfwd
                af, ar = _alphas(lr)
                if unif() < af:
                    accepted_n[1] += 1
                    w.on_toggle(i, False)
                    state.toggle(i, delta)
                    incl[i] += ns - since[i]
                    record = MoveRecord(t, MoveKind.DELETE, i, True, af, ar, delta)

        if record is not None:
            accepted_moves += 1
            improved = state.log_post > best
            if cfg.adaptation_enabled:
                r = adapt_weights(w, record, t, n, cfg)
                if r > max_ratio:
                    max_ratio = r
                i = record.position
                wmin = min(wmin, w.log_a[i], w.log_d[i])
                wmax = max(wmax, w.log_a[i], w.log_d[i])

        if cfg.adjust_enabled and state.k > 0:
            proposed[2] += 1
            rec = adjust_move(state, scorer, unif, t, w)
            if rec.accepted:
                accepted_n[2] += 1
                if rec.target != rec.position:
                    accepted_moves += 1
                    incl[rec.position] += ns - since[rec.position]
                    since[rec.target] = ns
                    if state.log_post > best:
                        improved = True

        if accepted_moves >= cfg.recompute_every:
            accepted_moves = 0
            max_drift = max(max_drift, state.recompute(scorer))
            w.resync(state)

        if improved and state.log_post > best:
            best = state.log_post
            map_pos = list(state.positions)
            trace_iter.append(t + 1)
            trace_time.append(time.perf_counter() - t0)
            trace_lp.append(best)

        if t >= burn_in and (t - burn_in) % thin == 0:
            count_hist[state.k] += 1
            if track:
                state_hist[state.code] += 1
            ns += 1
        done = t + 1

    for i in state.positions:
        incl[i] += ns - since[i]
    return {
        "iterations_done": done,
        "elapsed": time.perf_counter() - t0,
        "n_samples": ns,
        "count_hist": count_hist,
        "inclusion": incl,
        "state_hist": state_hist,
        "map_log_post": best,
        "map_positions": np.array(map_pos, dtype=np.int64),
        "trace_iter": np.array(trace_iter, dtype=np.int64),
        "trace_time": np.array(trace_time),
        "trace_log_post": np.array(trace_lp),
        "proposed": np.array(proposed, dtype=np.int64),
        "accepted": np.array(accepted_n, dtype=np.int64),
        "final_positions": np.array(state.positions, dtype=np.int64),
        "final_log_post": state.log_post,
        "log_a": w.log_a,
        "log_d": w.log_d,
        "max_adapt_ratio": max_ratio,
        "weight_min": wmin,
        "weight_max": wmax,
        "max_drift": max_drift,
        "rebuilds": rebuilds,
    }


def _chain_compiled(cfg: SamplerConfig, scorer: SegmentScorer, init: ChangepointState, rng_gen: np.random.Generator,
                    track: bool) -> dict:
    core = _backend.core()
    kind, consts, length = kernel_params(scorer.cache, scorer.model)
    cache = scorer.cache
    tabs = scorer.tables
    plf = cache.prefix_logfact if cache.prefix_logfact is not None else np.zeros(1)
    n = scorer.n
    opts = {
        "iterations": cfg.iterations,
        "burn_in": cfg.burn_in,
        "thin": cfg.thin,
        "p_add": cfg.p_add,
        "alpha_target": cfg.alpha_target,
        "h": cfg.h,
        "adjust": cfg.adjust_enabled,
        "thresholding": cfg.thresholding_enabled,
        "dual": cfg.dual_adaptation_enabled,
        "dual_weight": cfg.dual_weight,
        "adaptation": cfg.adaptation_enabled,
        "log_cutoff": cfg.log_cutoff,
        "log_a_inactive": cfg.log_a_inactive,
        "log_floor": cfg.log_floor,
        "log_ceil": cfg.log_ceil,
        "time_budget": cfg.time_budget or 0.0,
        "recompute_every": cfg.recompute_every,
        "track_states": track,
        "log_prior_odds": cfg.log_prior_odds,
    }
    return core.run_chain(
        rng_gen.bit_generator, kind, consts, length,
        np.ascontiguousarray(cache.prefix_sum), np.ascontiguousarray(cache.prefix_sumsq), np.ascontiguousarray(plf),
        np.ascontiguousarray(tabs.first_gap), np.ascontiguousarray(tabs.gap),
        np.ascontiguousarray(tabs.first_survivor), np.ascontiguousarray(tabs.survivor),
        np.array(init.positions, dtype=np.int64), init.log_post,
        np.zeros(n + 1), np.zeros(n + 1), opts,
    )


def _point_mass(init: ChangepointState, track: bool) -> PosteriorSummary:
    n = init.n
    counts = np.zeros(n, dtype=np.int64)
    counts[init.k] = 1
    incl = np.zeros(n + 1, dtype=np.int64)
    incl[init.positions] = 1
    states = None
    if track:
        states = np.zeros(1 << (n - 1), dtype=np.int64)
        states[init.code] = 1
    return PosteriorSummary(n, counts, incl, 1, init.log_post, list(init.positions),
                            [(0, 0.0, init.log_post)], {}, states)


def run(cfg: SamplerConfig, cache: SeriesCache, model: SegmentModel, prior: GapPrior,
        init: ChangepointState | Sequence[int] | None = None, *, scorer: SegmentScorer | None = None,
        rng: np.random.Generator | None = None) -> SamplerResult:
    """Run one chain and summarise the retained samples.

    ``init`` may be a state, a list of changepoints, or None for the empty
    configuration. The random stream comes from ``rng`` if given, else from
    ``PCG64(cfg.seed)``. Unpacks as ``(summary, stats)``.
    """
    if scorer is None:
        scorer = SegmentScorer(cache, model, prior)
    n = scorer.n
    if init is None:
        init = ChangepointState.from_positions([], scorer)
    elif not isinstance(init, ChangepointState):
        init = ChangepointState.from_positions(init, scorer)
    else:
        if init.n != n:
            raise StateError(f"initial state has n={init.n}, data has n={n}")
        init = ChangepointState.from_positions(init.positions, scorer)
    track = cfg.track_states
    if track is None:
        track = n - 1 <= AUTO_TRACK_POSITIONS
    if track and n - 1 > MAX_CODED_POSITIONS:
        raise ConfigError(f"configuration histograms need n - 1 <= {MAX_CODED_POSITIONS}")
    compiled = _backend.use_compiled(cfg.backend)
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))

    if cfg.iterations == 0:
        summary = _point_mass(init, track)
        zeros = np.zeros(3, dtype=np.int64)
        stats = RunStats("compiled" if compiled else "python", 0, 0.0, zeros, zeros.copy(), 0.0, 0.0, 0.0, 0.0, 0,
                         list(init.positions), init.log_post, np.zeros(n + 1), np.zeros(n + 1))
        return SamplerResult(summary, stats)

    out = (_chain_compiled if compiled else _chain_python)(cfg, scorer, init, rng, track)
    log_a = np.asarray(out["log_a"])
    log_d = np.asarray(out["log_d"])
    inner = slice(1, n)
    stats = RunStats(
        backend="compiled" if compiled else "python",
        iterations_done=int(out["iterations_done"]),
        elapsed=float(out["elapsed"]),
        proposed=out["proposed"],
        accepted=out["accepted"],
        max_adapt_ratio=float(out["max_adapt_ratio"]),
        log_weight_min=float(min(log_a[inner].min(), log_d[inner].min(), out["weight_min"])),
        log_weight_max=float(max(log_a[inner].max(), log_d[inner].max(), out["weight_max"])),
        max_drift=float(out["max_drift"]),
        rebuilds=int(out["rebuilds"]),
        final_positions=[int(p) for p in out["final_positions"]],
        final_log_post=float(out["final_log_post"]),
        log_a=log_a,
        log_d=log_d,
    )
    trace = list(zip(out["trace_iter"].tolist(), out["trace_time"].tolist(), out["trace_log_post"].tolist()))
    summary = PosteriorSummary(
        n=n,
        count_counts=out["count_hist"],
        inclusion_counts=out["inclusion"],
        n_samples=int(out["n_samples"]),
        map_log_post=float(out["map_log_post"]),
        map_positions=[int(p) for p in out["map_positions"]],
        map_trace=trace,
        acceptance_rates=stats.acceptance_rates,
        state_counts=out["state_hist"],
    )
    return SamplerResult(summary, stats)
