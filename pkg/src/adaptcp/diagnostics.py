"""Posterior summaries and the smoothed divergence used to compare engines."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import kl_div

from .errors import EmptySummaryError, ShapeError, StateError

DEFAULT_DELTA = 1e-12


def divergence(p, q, delta: float = DEFAULT_DELTA) -> float:
    """Smoothed Kullback-Leibler divergence D_delta(P || Q) between count distributions.

    Both arguments are mixed with the uniform distribution,
    ``(1 - delta) * P + delta / len(P)``, before taking KL, so the result is
    finite even when the supports differ. ``delta = 0`` gives plain KL.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ShapeError(f"distributions have lengths {p.size} and {q.size}")
    if p.size == 0:
        raise ShapeError("distributions are empty")
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    ps = (1.0 - delta) * p + delta / p.size
    qs = (1.0 - delta) * q + delta / q.size
    # kl_div adds q - p termwise, which is zero in total and keeps each term >= 0
    return max(float(np.sum(kl_div(ps, qs))), 0.0)


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ShapeError(f"distributions have lengths {p.size} and {q.size}")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class PosteriorSummary:
    """Streaming summary of retained samples.

    Counts are kept as integers so summaries from independent chains merge
    exactly; ``inclusion_counts`` and ``inclusion_prob`` are indexed by
    position (entries 0 and n are always zero). ``state_counts`` is the
    histogram over full configurations, indexed by the bit code
    ``sum(2**(i - 1) for i in positions)``, when it was tracked.
    """

    n: int
    count_counts: np.ndarray
    inclusion_counts: np.ndarray
    n_samples: int
    map_log_post: float = -math.inf
    map_positions: list[int] = field(default_factory=list)
    map_trace: list[tuple[int, float, float]] = field(default_factory=list)
    acceptance_rates: dict[str, float] = field(default_factory=dict)
    state_counts: np.ndarray | None = None

    @property
    def count_hist(self) -> np.ndarray:
        if self.n_samples == 0:
            raise EmptySummaryError("summary holds no samples")
        return self.count_counts / self.n_samples

    @property
    def inclusion_prob(self) -> np.ndarray:
        if self.n_samples == 0:
            raise EmptySummaryError("summary holds no samples")
        return self.inclusion_counts / self.n_samples

    def state_distribution(self) -> np.ndarray:
        if self.state_counts is None:
            raise EmptySummaryError("configuration histogram was not tracked")
        return self.state_counts / self.n_samples

    def modal_count(self) -> int:
        return int(np.argmax(self.count_counts))

    def merge(self, other: "PosteriorSummary") -> "PosteriorSummary":
        """Combine summaries of disjoint sample sets (histograms add, MAP takes the max)."""
        if other.n != self.n:
            raise ShapeError(f"cannot merge summaries for n={self.n} and n={other.n}")
        best = self if self.map_log_post >= other.map_log_post else other
        total = self.n_samples + other.n_samples
        rates = {}
        for key in set(self.acceptance_rates) | set(other.acceptance_rates):
            a = self.acceptance_rates.get(key, 0.0)
            b = other.acceptance_rates.get(key, 0.0)
            rates[key] = (a * self.n_samples + b * other.n_samples) / total if total else 0.5 * (a + b)
        states = None
        if self.state_counts is not None and other.state_counts is not None:
            states = self.state_counts + other.state_counts
        return PosteriorSummary(
            n=self.n,
            count_counts=self.count_counts + other.count_counts,
            inclusion_counts=self.inclusion_counts + other.inclusion_counts,
            n_samples=total,
            map_log_post=best.map_log_post,
            map_positions=list(best.map_positions),
            map_trace=sorted(self.map_trace + other.map_trace, key=lambda r: (r[1], r[2])),
            acceptance_rates=rates,
            state_counts=states,
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_samples": int(self.n_samples),
            "map_log_post": self.map_log_post,
            "map_positions": [int(p) for p in self.map_positions],
            "acceptance_rates": self.acceptance_rates,
            "modal_count": self.modal_count() if self.n_samples else None,
        }


class SummaryAccumulator:
    """Builds a :class:`PosteriorSummary` one retained sample at a time."""

    def __init__(self, n: int, track_states: bool = False):
        self.n = n
        self.count_counts = np.zeros(n, dtype=np.int64)
        self.inclusion_counts = np.zeros(n + 1, dtype=np.int64)
        self.state_counts = np.zeros(1 << (n - 1), dtype=np.int64) if track_states else None
        self.n_samples = 0
        self.map_log_post = -math.inf
        self.map_positions: list[int] = []
        self.map_trace: list[tuple[int, float, float]] = []

    def add(self, positions: Sequence[int], log_post: float | None = None,
            iteration: int = 0, seconds: float = 0.0) -> None:
        pos = [int(p) for p in positions]
        if any(p < 1 or p > self.n - 1 for p in pos):
            raise StateError(f"positions {pos} outside 1..{self.n - 1}")
        self.count_counts[len(pos)] += 1
        if pos:
            self.inclusion_counts[pos] += 1
        if self.state_counts is not None:
            self.state_counts[sum(1 << (p - 1) for p in pos)] += 1
        self.n_samples += 1
        if log_post is not None and log_post > self.map_log_post:
            self.map_log_post = float(log_post)
            self.map_positions = sorted(pos)
            self.map_trace.append((iteration, seconds, float(log_post)))

    def summary(self) -> PosteriorSummary:
        if self.n_samples == 0:
            raise EmptySummaryError("no samples were retained")
        return PosteriorSummary(
            n=self.n,
            count_counts=self.count_counts.copy(),
            inclusion_counts=self.inclusion_counts.copy(),
            n_samples=self.n_samples,
            map_log_post=self.map_log_post,
            map_positions=list(self.map_positions),
            map_trace=list(self.map_trace),
            state_counts=None if self.state_counts is None else self.state_counts.copy(),
        )


def summarize(samples: Iterable[Sequence[int]], n: int, log_posts: Iterable[float] | None = None,
              track_states: bool = False) -> PosteriorSummary:
    """Summary of an explicit collection of changepoint position lists."""
    acc = SummaryAccumulator(n, track_states)
    if log_posts is None:
        for s in samples:
            acc.add(s)
    else:
        for s, lp in zip(samples, log_posts):
            acc.add(s, lp)
    return acc.summary()


def save_summary(summary: PosteriorSummary, directory: str, prefix: str = "") -> dict[str, str]:
    """Write the count histogram, inclusion probabilities and MAP record; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "count_hist": os.path.join(directory, f"{prefix}count_hist.tsv"),
        "inclusion": os.path.join(directory, f"{prefix}inclusion.tsv"),
        "map": os.path.join(directory, f"{prefix}map.json"),
        "map_trace": os.path.join(directory, f"{prefix}map_trace.tsv"),
    }
    hist = summary.count_hist
    with open(paths["count_hist"], "w") as fh:
        fh.write("k\tprobability\tcount\n")
        for k in range(len(hist)):
            if summary.count_counts[k]:
                fh.write(f"{k}\t{float(hist[k])!r}\t{summary.count_counts[k]}\n")
    incl = summary.inclusion_prob
    with open(paths["inclusion"], "w") as fh:
        fh.write("position\tprobability\n")
        for i in range(1, summary.n):
            fh.write(f"{i}\t{float(incl[i])!r}\n")
    with open(paths["map"], "w") as fh:
        json.dump({"log_post": summary.map_log_post, "positions": [int(p) for p in summary.map_positions]}, fh)
    with open(paths["map_trace"], "w") as fh:
        fh.write("iteration\tseconds\tlog_post\n")
        for it, sec, lp in summary.map_trace:
            fh.write(f"{it}\t{sec!r}\t{lp!r}\n")
    return paths


def read_count_hist(path: str, n: int) -> np.ndarray:
    """Inverse of the histogram file written by :func:`save_summary`."""
    out = np.zeros(n)
    with open(path) as fh:
        next(fh)
        for line in fh:
            k, prob, _ = line.split("\t")
            out[int(k)] = float(prob)
    return out
