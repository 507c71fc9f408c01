"""Categorical sampling for the changepoint proposals.

Walker alias tables (built with Vose's two-worklist method), the adaptive
add/delete selection weights with optional thresholding of the add weights,
and Carpenter's one-pass order-statistics sampler used by the recursions.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import _backend
from .errors import SamplingError
from .state import ChangepointState

MAX_REDRAWS = 50
LOG_FLOOR = -30.0
LOG_CEIL = 30.0


class AliasTable:
    """O(1) sampler for a fixed categorical distribution.

    Slot ``j`` keeps itself with probability ``prob[j]`` and otherwise yields
    ``alias[j]``.
    """

    __slots__ = ("prob", "alias")

    def __init__(self, prob: np.ndarray, alias: np.ndarray):
        self.prob = prob
        self.alias = alias

    @property
    def size(self) -> int:
        return len(self.prob)

    def sample(self, unif: Callable[[], float]) -> int:
        j = int(unif() * len(self.prob))
        if unif() < self.prob[j]:
            return j
        return int(self.alias[j])

    def sample_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        m = len(self.prob)
        slots = np.minimum((rng.random(size) * m).astype(np.int64), m - 1)
        keep = rng.random(size) < self.prob[slots]
        return np.where(keep, slots, self.alias[slots])

    def probabilities(self) -> np.ndarray:
        """Distribution induced by the table (for verification)."""
        m = len(self.prob)
        out = self.prob / m
        np.add.at(out, self.alias, (1.0 - self.prob) / m)
        return out


def _vose(weights, m: int):
    # shared with the compiled kernel: identical arithmetic, identical tables
    total = 0.0
    for j in range(m):
        total += weights[j]
    scale = m / total
    scaled = [weights[j] * scale for j in range(m)]
    prob = np.ones(m)
    alias = np.arange(m, dtype=np.int64)
    small = []
    large = []
    for j in range(m):
        if scaled[j] < 1.0:
            small.append(j)
        else:
            large.append(j)
    while small and large:
        lo = small.pop()
        hi = large.pop()
        prob[lo] = scaled[lo]
        alias[lo] = hi
        scaled[hi] = (scaled[hi] + scaled[lo]) - 1.0
        if scaled[hi] < 1.0:
            small.append(hi)
        else:
            large.append(hi)
    return prob, alias


def build_alias(weights) -> AliasTable:
    """Alias table for positive, finite (unnormalised) ``weights``."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise SamplingError("cannot build an alias table over zero categories")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise SamplingError("alias weights must be positive and finite")
    prob, alias = _vose(w.tolist(), w.size)
    return AliasTable(prob, alias)


class SelectionWeights:
    """Adaptive add (``a``) and delete (``d``) weights over positions 1..n-1.

    With thresholding, only positions whose add weight exceeds the cutoff
    are sampled through the alias table; the rest share the flat weight
    ``a_inactive`` and are drawn uniformly. Without thresholding every
    position is active. Weights are clamped to ``[log_floor, log_ceil]``.
    """

    def __init__(
        self,
        n: int,
        state: ChangepointState,
        *,
        thresholding: bool = True,
        log_cutoff: float = 1.0,
        log_a_inactive: float = 0.0,
        log_floor: float = LOG_FLOOR,
        log_ceil: float = LOG_CEIL,
        log_a: np.ndarray | None = None,
        log_d: np.ndarray | None = None,
    ):
        if not log_floor < log_ceil:
            raise SamplingError("log_floor must be below log_ceil")
        if thresholding and not log_a_inactive < log_cutoff:
            raise SamplingError("a_inactive must lie below a_cutoff")
        self.n = n
        self.thresholding = thresholding
        self.log_cutoff = log_cutoff if thresholding else -math.inf
        self.log_a_inactive = log_a_inactive
        self.a_inactive = math.exp(log_a_inactive)
        self.log_floor = log_floor
        self.log_ceil = log_ceil
        self.log_a = np.zeros(n + 1) if log_a is None else np.clip(np.array(log_a, dtype=np.float64), log_floor, log_ceil)
        self.log_d = np.zeros(n + 1) if log_d is None else np.clip(np.array(log_d, dtype=np.float64), log_floor, log_ceil)
        self.a_w = np.exp(self.log_a)
        self.d_w = np.exp(self.log_d)
        self.active = np.zeros(n + 1, dtype=np.uint8)
        self.active_list: list[int] = []
        self.active_index = np.full(n + 1, -1, dtype=np.int64)
        for i in range(1, n):
            if self.log_a[i] > self.log_cutoff:
                self._activate(i)
        self.table: AliasTable | None = None
        self.stale = True
        self.resync(state)

    # -- bookkeeping -------------------------------------------------------

    def _activate(self, i: int) -> None:
        self.active[i] = 1
        self.active_index[i] = len(self.active_list)
        self.active_list.append(i)

    def _deactivate(self, i: int) -> None:
        idx = self.active_index[i]
        last = self.active_list.pop()
        if last != i:
            self.active_list[idx] = last
            self.active_index[last] = idx
        self.active_index[i] = -1
        self.active[i] = 0

    def resync(self, state: ChangepointState) -> None:
        """Recompute the running sums and counts exactly."""
        z = state.z
        s = 0.0
        count = 0
        for i in self.active_list:
            if not z[i]:
                s += self.a_w[i]
                count += 1
        self.act_free_sum = s if count else 0.0
        self.act_free_count = count
        self.inact_free_count = (self.n - 1 - state.k) - count
        d = 0.0
        for i in state.positions:
            d += self.d_w[i]
        self.d_sum = d

    def rebuild(self, state: ChangepointState) -> None:
        if self.active_list:
            self.table = AliasTable(*_vose([self.a_w[i] for i in self.active_list], len(self.active_list)))
        else:
            self.table = None
        self.stale = False
        self.resync(state)

    def hat_log_a(self, i: int) -> float:
        return self.log_a[i] if self.active[i] else self.log_a_inactive

    def hat_a(self, i: int) -> float:
        return self.a_w[i] if self.active[i] else self.a_inactive

    def add_mass(self) -> float:
        """Total add weight over free positions: a_active + a_inactive * |inactive free|."""
        return self.act_free_sum + self.a_inactive * self.inact_free_count

    def on_toggle(self, i: int, now_on: bool) -> None:
        if now_on:
            if self.active[i]:
                self.act_free_count -= 1
                self.act_free_sum = self.act_free_sum - self.a_w[i] if self.act_free_count else 0.0
            else:
                self.inact_free_count -= 1
            self.d_sum += self.d_w[i]
        else:
            if self.active[i]:
                self.act_free_count += 1
                self.act_free_sum += self.a_w[i]
            else:
                self.inact_free_count += 1
            self.d_sum -= self.d_w[i]

    def on_move(self, i: int, j: int) -> None:
        self.on_toggle(i, False)
        self.on_toggle(j, True)

    def _clamp(self, value: float) -> float:
        if value < self.log_floor:
            return self.log_floor
        if value > self.log_ceil:
            return self.log_ceil
        return value

    def shift_log_a(self, i: int, step: float, occupied: bool) -> float:
        """Add ``step`` to log a_i (clamped); returns the change actually applied."""
        old_log = self.log_a[i]
        new_log = self._clamp(old_log + step)
        if new_log == old_log:
            return 0.0
        old_w = self.a_w[i]
        new_w = math.exp(new_log)
        self.log_a[i] = new_log
        self.a_w[i] = new_w
        was_active = bool(self.active[i])
        now_active = new_log > self.log_cutoff
        if was_active and now_active:
            if not occupied:
                self.act_free_sum += new_w - old_w
            self.stale = True
        elif was_active:
            self._deactivate(i)
            if not occupied:
                self.act_free_count -= 1
                self.act_free_sum = self.act_free_sum - old_w if self.act_free_count else 0.0
                self.inact_free_count += 1
            self.stale = True
        elif now_active:
            self._activate(i)
            if not occupied:
                self.act_free_count += 1
                self.act_free_sum += new_w
                self.inact_free_count -= 1
            self.stale = True
        return new_log - old_log

    def shift_log_d(self, i: int, step: float, occupied: bool) -> float:
        old_log = self.log_d[i]
        new_log = self._clamp(old_log + step)
        if new_log == old_log:
            return 0.0
        new_w = math.exp(new_log)
        if occupied:
            self.d_sum += new_w - self.d_w[i]
        self.log_d[i] = new_log
        self.d_w[i] = new_w
        return new_log - old_log

    # -- proposals ---------------------------------------------------------

    def draw_add(self, state: ChangepointState, unif: Callable[[], float]) -> int:
        """Draw a free position with probability hat_a_i / add_mass()."""
        if self.stale:
            self.rebuild(state)
        z = state.z
        u = unif()
        if self.act_free_count > 0 and (self.inact_free_count == 0 or u * self.add_mass() < self.act_free_sum):
            table = self.table
            lst = self.active_list
            for _ in range(MAX_REDRAWS):
                cand = lst[table.sample(unif)]
                if not z[cand]:
                    return cand
            # pathological occupancy: normalise directly over the free active set
            target = unif() * self.act_free_sum
            acc = 0.0
            last = -1
            for cand in lst:
                if not z[cand]:
                    acc += self.a_w[cand]
                    last = cand
                    if target < acc:
                        return cand
            return last
        m = self.n - 1
        active = self.active
        for _ in range(MAX_REDRAWS):
            cand = 1 + int(unif() * m)
            if not z[cand] and not active[cand]:
                return cand
        target = int(unif() * self.inact_free_count)
        seen = 0
        last = -1
        for cand in range(1, self.n):
            if not z[cand] and not active[cand]:
                if seen == target:
                    return cand
                seen += 1
                last = cand
        return last

    def draw_delete(self, state: ChangepointState, unif: Callable[[], float]) -> tuple[int, float]:
        """Draw a changepoint with probability d_i / d_+; returns (i, log d_+)."""
        d_w = self.d_w
        pos = state.positions
        total = 0.0
        for i in pos:
            total += d_w[i]
        self.d_sum = total
        target = unif() * total
        acc = 0.0
        for i in pos:
            acc += d_w[i]
            if target < acc:
                return i, math.log(total)
        return pos[-1], math.log(total)


def sample_add_position(w: SelectionWeights, state: ChangepointState, rng: np.random.Generator):
    """Propose a position to add.

    Returns ``(i, log_q_fwd, log_q_rev_term)``: the log probability of
    proposing ``i`` and the log probability that the reverse delete move
    proposes ``i`` once it is a changepoint.
    """
    if state.k >= state.n - 1:
        raise SamplingError("every position is already a changepoint")
    i = w.draw_add(state, rng.random)
    log_fwd = w.hat_log_a(i) - math.log(w.add_mass())
    log_rev = w.log_d[i] - math.log(w.d_sum + w.d_w[i])
    return i, log_fwd, log_rev


def sample_delete_position(w: SelectionWeights, state: ChangepointState, rng: np.random.Generator):
    """Propose a changepoint to delete; same return convention as :func:`sample_add_position`."""
    if state.k == 0:
        raise SamplingError("no changepoint to delete")
    i, log_dsum = w.draw_delete(state, rng.random)
    log_fwd = w.log_d[i] - log_dsum
    log_rev = w.hat_log_a(i) - math.log(w.hat_a(i) + w.add_mass())
    return i, log_fwd, log_rev


def _normalised_probs(log_probs) -> np.ndarray:
    lp = np.asarray(log_probs, dtype=np.float64).ravel()
    if lp.size == 0 or not np.any(np.isfinite(lp)):
        raise SamplingError("log probabilities are all -inf")
    if np.any(np.isnan(lp)) or np.any(lp == np.inf):
        raise SamplingError("log probabilities contain NaN or +inf")
    return np.exp(lp - logsumexp(lp))


def carpenter_sample(log_probs, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """``n_draws`` categorical draws in one pass over the categories.

    Sorted uniforms are built from normalised cumulative exponential
    spacings and merged against the cumulative distribution, so the output
    comes out in non-decreasing category order; permute it if the draws are
    assigned to exchangeable units.
    """
    if n_draws < 1:
        raise SamplingError(f"n_draws must be >= 1, got {n_draws}")
    probs = _normalised_probs(log_probs)
    spacings = rng.standard_exponential(n_draws + 1)
    cum = np.cumsum(spacings)
    u = cum[:n_draws] / cum[-1]
    return _backend.merge_sorted_uniforms(probs, u)
