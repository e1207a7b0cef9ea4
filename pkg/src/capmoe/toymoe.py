"""A miniature MoE layer with linear experts, for checking output combination under drops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capmoe.gating import AssignmentSet

AFFECTED_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ToyExpert:
    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"expert weight must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("expert weight has non-finite entries")
        object.__setattr__(self, "weight", w)


@dataclass(frozen=True, eq=False)
class ToyMoELayer:
    experts: list[ToyExpert]
    renormalize_gates: bool = False

    def __post_init__(self):
        if not self.experts:
            raise ValueError("need at least one expert")
        dims = {e.weight.shape[0] for e in self.experts}
        if len(dims) != 1:
            raise ValueError(f"experts disagree on d_model: {sorted(dims)}")

    @property
    def d_model(self) -> int:
        return self.experts[0].weight.shape[0]

    @property
    def n(self) -> int:
        return len(self.experts)

    @classmethod
    def random(cls, n: int, d_model: int, seed: int = 0, renormalize_gates: bool = False) -> "ToyMoELayer":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d_model)
        return cls([ToyExpert(rng.standard_normal((d_model, d_model)) * scale) for _ in range(n)],
                   renormalize_gates)

    def forward(self, tokens: np.ndarray, assignments: AssignmentSet) -> np.ndarray:
        """y_t = sum over t's mappings (ascending expert) of gate * W_e x_t.

        Every expert is applied to the full token matrix and rows are gathered
        afterwards, so a token's row never depends on which other tokens were
        routed alongside it.
        """
        x = np.asarray(tokens, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise ValueError(f"tokens must be (t, {self.d_model}), got {x.shape}")
        t = x.shape[0]
        if len(assignments):
            if assignments.tokens.max() >= t:
                raise ValueError(f"token index {assignments.tokens.max()} out of range for t={t}")
            if assignments.experts.max() >= self.n:
                raise ValueError(f"expert index {assignments.experts.max()} out of range for n={self.n}")

        gates = assignments.scores
        if self.renormalize_gates and len(assignments):
            totals = np.bincount(assignments.tokens, weights=gates, minlength=t)
            gates = gates / totals[assignments.tokens]

        out = np.zeros_like(x)
        for i in np.unique(assignments.experts):
            sel = assignments.experts == i
            rows = assignments.tokens[sel]
            h = x @ self.experts[i].weight.T
            out[rows] += gates[sel][:, None] * h[rows]
        return out


def forward(layer: ToyMoELayer, tokens: np.ndarray, assignments: AssignmentSet) -> np.ndarray:
    return layer.forward(tokens, assignments)


def output_divergence(baseline: np.ndarray, constrained: np.ndarray) -> tuple[float, float]:
    """(mean relative L2 over affected rows, fraction of rows affected)."""
    baseline = np.asarray(baseline, dtype=np.float64)
    constrained = np.asarray(constrained, dtype=np.float64)
    if baseline.shape != constrained.shape:
        raise ValueError(f"shape mismatch {baseline.shape} vs {constrained.shape}")
    if baseline.shape[0] == 0:
        return 0.0, 0.0
    diff = np.linalg.norm(baseline - constrained, axis=1)
    ref = np.linalg.norm(baseline, axis=1)
    rel = np.divide(diff, ref, out=diff.copy(), where=ref > 0)
    affected = rel > AFFECTED_TOL
    if not affected.any():
        return 0.0, 0.0
    return float(rel[affected].mean()), float(affected.mean())
