"""Expert capacity and overflow dropping (Token Drop), plus the Expert Drop baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Optional, Union

import numpy as np

from capmoe.gating import AssignmentSet, expert_load

Metric = Literal["order", "reverse_order", "random", "score"]
METRICS: tuple[Metric, ...] = ("order", "reverse_order", "random", "score")

# Capacity is an int, or math.inf for "unbounded".
Capacity = Union[int, float]
UNBOUNDED: float = math.inf


def _exact(x: float) -> Fraction:
    # Decimal reading of the float, so that 1.1 means 11/10 rather than its binary neighbour.
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class CapacityPolicy:
    gamma: float = 2.0
    metric: Metric = "score"
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")


@dataclass(frozen=True, eq=False)
class DropResult:
    retained: AssignmentSet
    dropped: frozenset  # of (token, expert)
    capacity: Capacity
    masked_scores: Optional[np.ndarray]


def capacity_limit(gamma: float, t: int, k: int, n: int) -> Capacity:
    """C = ceil(gamma * t*k/n); ``UNBOUNDED`` for gamma = inf."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if math.isinf(gamma):
        return UNBOUNDED
    return math.ceil(_exact(gamma) * Fraction(t * k, n))


def overflow_counts(loads: np.ndarray, capacity: Capacity) -> np.ndarray:
    """K_j = max(0, N_j - C) per expert."""
    if math.isinf(capacity):
        return np.zeros_like(loads)
    return np.maximum(loads - int(capacity), 0)


def _random_generator(seed: int, layer_id: int, expert: int) -> np.random.Generator:
    # Keyed per expert so draws do not depend on the order experts are visited in.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, layer_id, expert])))


def _pick_drops(
    tokens: np.ndarray, scores: np.ndarray, count: int, metric: Metric, rng_key: tuple[int, int, int]
) -> np.ndarray:
    """Positions (into ``tokens``) of the ``count`` mappings to drop from one expert."""
    if metric == "order":
        order = np.argsort(-tokens, kind="stable")
    elif metric == "reverse_order":
        order = np.argsort(tokens, kind="stable")
    elif metric == "score":
        # Lowest score first; ties at the threshold drop the higher token id.
        order = np.lexsort((-tokens, scores))
    else:
        return _random_generator(*rng_key).choice(len(tokens), size=count, replace=False)
    return order[:count]


def drop_overflow(
    scores: np.ndarray,
    a: AssignmentSet,
    capacity: Capacity,
    policy: CapacityPolicy,
    layer_id: int = 0,
) -> DropResult:
    """Drop exactly N_j - C mappings from every overloaded expert j."""
    n = scores.shape[1]
    loads = expert_load(a, n)
    excess = overflow_counts(loads, capacity)
    keep = np.ones(len(a), dtype=bool)
    for j in np.flatnonzero(excess):
        pos = np.flatnonzero(a.experts == j)
        chosen = _pick_drops(
            a.tokens[pos], a.scores[pos], int(excess[j]), policy.metric, (policy.seed, layer_id, int(j))
        )
        keep[pos[chosen]] = False

    dropped = frozenset(zip(a.tokens[~keep].tolist(), a.experts[~keep].tolist()))
    masked = scores.copy()
    masked[a.tokens[~keep], a.experts[~keep]] = 0.0
    return DropResult(a.select(keep), dropped, capacity, masked)


def score_threshold(column_scores: np.ndarray, overflow: int) -> float:
    """tau_j: the overflow-th smallest score among the expert's assigned mappings."""
    if overflow < 1:
        raise ValueError("threshold only defined for overflow >= 1")
    return float(np.partition(column_scores, overflow - 1)[overflow - 1])


def dropped_fraction(loads: np.ndarray, capacity: Capacity) -> Fraction:
    """sum_i max(0, N_i - C) / sum_i N_i, as an exact fraction."""
    total = int(np.sum(loads))
    if total <= 0:
        raise ValueError("dropped_fraction needs a positive total load")
    return Fraction(int(overflow_counts(np.asarray(loads), capacity).sum()), total)


def experts_to_skip(loads: np.ndarray, fraction: float) -> np.ndarray:
    n = len(loads)
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    count = math.floor(_exact(fraction) * n)
    if count >= n:
        raise ValueError(f"fraction {fraction} would skip all {n} experts")
    return np.sort(np.argsort(loads, kind="stable")[:count])


def expert_drop(
    a: AssignmentSet,
    loads: np.ndarray,
    fraction: float,
    scores: Optional[np.ndarray] = None,
) -> DropResult:
    """Skip the floor(fraction*n) least-loaded experts (ties: lower index first).

    Capacity does not apply here, so the result carries ``UNBOUNDED``.
    ``masked_scores`` is filled only when ``scores`` is passed.
    """
    skip = experts_to_skip(np.asarray(loads), fraction)
    keep = ~np.isin(a.experts, skip)
    dropped = frozenset(zip(a.tokens[~keep].tolist(), a.experts[~keep].tolist()))
    masked = None
    if scores is not None:
        masked = scores.copy()
        masked[a.tokens[~keep], a.experts[~keep]] = 0.0
    return DropResult(a.select(keep), dropped, UNBOUNDED, masked)
