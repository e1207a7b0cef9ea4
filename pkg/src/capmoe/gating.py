"""Softmax scoring, top-k selection and per-expert load counting.

A score matrix is a plain ``(t, n)`` float64 array. An exact ``0.0`` entry
means the token-to-expert mapping is unavailable; softmax of finite logits
never produces one, so the sentinel is unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from capmoe.trace import RoutingTrace


@dataclass(frozen=True, eq=False)
class AssignmentSet:
    """Token-to-expert mappings, stored as parallel arrays sorted by (token, expert)."""

    tokens: np.ndarray
    experts: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        experts = np.asarray(self.experts, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if not tokens.shape == experts.shape == scores.shape or tokens.ndim != 1:
            raise ValueError("tokens, experts and scores must be 1-D arrays of equal length")
        if np.any(scores <= 0):
            raise ValueError("mapping scores must be strictly positive")
        order = np.lexsort((experts, tokens))
        tokens, experts, scores = tokens[order], experts[order], scores[order]
        if len(tokens) > 1:
            same = (np.diff(tokens) == 0) & (np.diff(experts) == 0)
            if np.any(same):
                raise ValueError("duplicate (token, expert) mapping")
        for name, arr in (("tokens", tokens), ("experts", experts), ("scores", scores)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_mask(cls, scores: np.ndarray, mask: np.ndarray) -> "AssignmentSet":
        rows, cols = np.nonzero(mask)
        return cls(rows, cols, scores[rows, cols])

    @classmethod
    def empty(cls) -> "AssignmentSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[tuple[int, int, float]]:
        return zip(self.tokens.tolist(), self.experts.tolist(), self.scores.tolist())

    def __eq__(self, other):
        if not isinstance(other, AssignmentSet):
            return NotImplemented
        return (
            np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.experts, other.experts)
            and np.array_equal(self.scores, other.scores)
        )

    __hash__ = None  # type: ignore[assignment]

    def keys(self) -> set[tuple[int, int]]:
        return set(zip(self.tokens.tolist(), self.experts.tolist()))

    def mask(self, t: int, n: int) -> np.ndarray:
        m = np.zeros((t, n), dtype=bool)
        m[self.tokens, self.experts] = True
        return m

    def select(self, keep: np.ndarray) -> "AssignmentSet":
        return AssignmentSet(self.tokens[keep], self.experts[keep], self.scores[keep])

    def per_token_count(self, t: int) -> np.ndarray:
        return np.bincount(self.tokens, minlength=t)


def softmax_rows(trace: RoutingTrace | np.ndarray) -> np.ndarray:
    logits = trace.logits if isinstance(trace, RoutingTrace) else np.asarray(trace, np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of each row's k largest strictly positive entries.

    Ties go to the lower expert index.
    """
    t, n = scores.shape
    k = min(k, n)
    if t == 0 or k == 0:
        return np.zeros((t, n), dtype=bool)
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1 : k]
    above = scores > kth
    # Fill the remaining slots from entries equal to the k-th value, lowest index first.
    need = k - above.sum(axis=1, keepdims=True)
    at = scores == kth
    mask = above | (at & (np.cumsum(at, axis=1) <= need))
    mask &= scores > 0
    return mask


def topk_select(scores: np.ndarray, k: int) -> AssignmentSet:
    if k > scores.shape[1]:
        raise ValueError(f"k exceeds n ({k} > {scores.shape[1]})")
    return AssignmentSet.from_mask(scores, topk_mask(scores, k))


def expert_load(a: AssignmentSet, n: int) -> np.ndarray:
    if len(a) and a.experts.max() >= n:
        raise ValueError(f"expert index {a.experts.max()} out of range for n={n}")
    return np.bincount(a.experts, minlength=n).astype(np.int64)


def expected_load(t: int, k: int, n: int) -> Fraction:
    """t*k/n, kept exact; ``float()`` it for display."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Fraction(t * k, n)
