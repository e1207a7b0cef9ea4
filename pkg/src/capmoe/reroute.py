"""Capacity-aware token reroute.

Each round re-runs top-k over the (progressively masked) score matrix, then
zeroes the lowest-scoring mappings of every expert above capacity. Tokens
whose mappings were zeroed pick their next-best available experts in the
following round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from capmoe.capacity import Capacity, UNBOUNDED
from capmoe.gating import AssignmentSet, topk_mask


@dataclass(frozen=True)
class RerouteConfig:
    k: int
    capacity: Capacity = UNBOUNDED
    rounds: int = 2

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not (math.isinf(self.capacity) or self.capacity >= 0):
            raise ValueError(f"capacity must be >= 0, got {self.capacity}")


@dataclass(frozen=True)
class RoundStats:
    loads: np.ndarray  # post-drop loads at the end of the round
    dropped_count: int


@dataclass(frozen=True, eq=False)
class RerouteResult:
    final: AssignmentSet
    per_round: list[RoundStats]
    updated_scores: np.ndarray


@dataclass(frozen=True, eq=False)
class RerouteSummary:
    rounds: int
    per_round: list[RoundStats]
    final: AssignmentSet
    loads: np.ndarray = field(repr=False)

    @property
    def retained(self) -> int:
        return len(self.final)


def _drop_over_capacity(scores: np.ndarray, mask: np.ndarray, capacity: Capacity) -> int:
    """Zero the excess mappings of overloaded experts in place; return how many."""
    if math.isinf(capacity):
        return 0
    loads = mask.sum(axis=0)
    dropped = 0
    for j in np.flatnonzero(loads > capacity):
        excess = int(loads[j] - capacity)
        tokens = np.flatnonzero(mask[:, j])
        col = scores[tokens, j]
        # Same rule as the score metric: lowest first, higher token id on ties.
        victims = tokens[np.lexsort((-tokens, col))[:excess]]
        scores[victims, j] = 0.0
        mask[victims, j] = False
        dropped += excess
    return dropped


def _rounds(scores: np.ndarray, k: int, capacity: Capacity) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
    """Yield (scores, post-drop mask, dropped count) after each round, forever.

    Only rows that lost a mapping are re-ranked; every other row's top-k is
    unchanged because its scores are. Once a round drops nothing the state
    is a fixed point and is yielded unchanged.
    """
    s = np.array(scores, dtype=np.float64, copy=True)
    mask = topk_mask(s, k)
    while True:
        before = mask.copy()
        dropped = _drop_over_capacity(s, mask, capacity)
        yield s, mask, dropped
        if dropped == 0:
            while True:
                yield s, mask, 0
        touched = np.flatnonzero((before & ~mask).any(axis=1))
        mask[touched] = topk_mask(s[touched], k)


def reroute(scores: np.ndarray, cfg: RerouteConfig) -> RerouteResult:
    per_round = []
    for r, (s, mask, dropped) in enumerate(_rounds(scores, cfg.k, cfg.capacity), start=1):
        per_round.append(RoundStats(mask.sum(axis=0).astype(np.int64), dropped))
        if r == cfg.rounds:
            return RerouteResult(AssignmentSet.from_mask(s, mask), per_round, s.copy())
    raise AssertionError("unreachable")


def reroute_sweep(scores: np.ndarray, k: int, capacity: Capacity, max_rounds: int) -> list[RerouteSummary]:
    """Summaries for R = 1..max_rounds taken from a single run."""
    if max_rounds < 1:
        raise ValueError(f"max_rounds must be >= 1, got {max_rounds}")
    out: list[RerouteSummary] = []
    per_round: list[RoundStats] = []
    for r, (s, mask, dropped) in enumerate(_rounds(scores, k, capacity), start=1):
        loads = mask.sum(axis=0).astype(np.int64)
        per_round.append(RoundStats(loads, dropped))
        out.append(RerouteSummary(r, list(per_round), AssignmentSet.from_mask(s, mask), loads))
        if r == max_rounds:
            return out
    raise AssertionError("unreachable")
