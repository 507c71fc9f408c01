"""Changepoint indicator vector with ordered position lookup."""

from __future__ import annotations

from bisect import bisect_left, insort
from typing import Sequence

import numpy as np

from .errors import StateError
from .models import GapPrior, SegmentModel, SegmentScorer, SeriesCache, validate_positions

# z is packed into an integer code for exact state histograms up to this size
MAX_CODED_POSITIONS = 24


class ChangepointState:
    """Indicator vector ``z`` (positions 1..n-1) plus its sorted changepoint list.

    ``log_post`` caches the unnormalised log posterior and is updated by the
    deltas the sampler computes; :meth:`recompute` restores it from scratch.
    """

    def __init__(self, n: int, positions: Sequence[int] = (), log_post: float = float("nan")):
        if n < 2:
            raise StateError(f"need n >= 2, got {n}")
        self.n = int(n)
        self.positions: list[int] = validate_positions(positions, n)
        self.z = np.zeros(n + 1, dtype=np.uint8)
        self.z[self.positions] = 1
        self.log_post = float(log_post)
        self.code = sum(1 << (p - 1) for p in self.positions) if n - 1 <= MAX_CODED_POSITIONS else -1

    @classmethod
    def from_positions(cls, positions: Sequence[int], scorer: SegmentScorer) -> "ChangepointState":
        state = cls(scorer.n, positions)
        state.log_post = scorer.log_posterior(state.positions)
        if not np.isfinite(state.log_post):
            raise StateError(f"configuration {state.positions} has zero prior or likelihood")
        return state

    @property
    def k(self) -> int:
        return len(self.positions)

    def copy(self) -> "ChangepointState":
        other = ChangepointState.__new__(ChangepointState)
        other.n = self.n
        other.positions = list(self.positions)
        other.z = self.z.copy()
        other.log_post = self.log_post
        other.code = self.code
        return other

    def neighbors(self, i: int) -> tuple[int, int]:
        """Closest changepoints strictly before and after ``i`` (0 and n when absent)."""
        pos = self.positions
        idx = bisect_left(pos, i)
        a = pos[idx - 1] if idx > 0 else 0
        if idx < len(pos) and pos[idx] == i:
            idx += 1
        b = pos[idx] if idx < len(pos) else self.n
        return a, b

    def toggle(self, i: int, delta: float) -> "ChangepointState":
        if not 1 <= i <= self.n - 1:
            raise StateError(f"position {i} outside 1..{self.n - 1}")
        if self.z[i]:
            self.positions.pop(bisect_left(self.positions, i))
            self.z[i] = 0
        else:
            insort(self.positions, i)
            self.z[i] = 1
        if self.code >= 0:
            self.code ^= 1 << (i - 1)
        self.log_post += delta
        return self

    def move(self, i: int, j: int, delta: float) -> "ChangepointState":
        """Relocate changepoint ``i`` to ``j`` without crossing a neighbour."""
        idx = bisect_left(self.positions, i)
        self.positions[idx] = j
        self.z[i] = 0
        self.z[j] = 1
        if self.code >= 0:
            self.code ^= (1 << (i - 1)) | (1 << (j - 1))
        self.log_post += delta
        return self

    def recompute(self, scorer: SegmentScorer) -> float:
        """Reset ``log_post`` from a full pass; returns the absolute drift removed."""
        fresh = scorer.log_posterior(self.positions)
        drift = abs(fresh - self.log_post)
        self.log_post = fresh
        return drift

    def __repr__(self):
        return f"ChangepointState(n={self.n}, k={self.k}, log_post={self.log_post:.6g})"


def neighbors(state: ChangepointState, i: int) -> tuple[int, int]:
    return state.neighbors(i)


def log_posterior(state: ChangepointState, cache: SeriesCache, model: SegmentModel, prior: GapPrior) -> float:
    """Unnormalised log posterior of ``state`` recomputed from scratch in O(k)."""
    return SegmentScorer(cache, model, prior).log_posterior(state.positions)


def apply_toggle(state: ChangepointState, i: int, delta_log_post: float) -> ChangepointState:
    """Flip ``z_i`` in place and shift the cached log posterior by ``delta_log_post``."""
    return state.toggle(i, delta_log_post)
