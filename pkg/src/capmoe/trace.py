"""Routing traces: per-layer router logits plus (t, n, k) metadata.

Trace files are JSON Lines, one layer per line::

    {"layer": 0, "t": 2, "n": 2, "k": 1, "logits": [[1.0, 0.0], [0.0, 1.0]]}

Floats are written with ``repr`` (shortest round-trip decimal), so a
save/load cycle reproduces the logits bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Literal, Optional

import numpy as np

Preset = Literal["uniform", "scratch-like", "upcycled-like"]
PRESETS = ("uniform", "scratch-like", "upcycled-like")

# (low, high) windows on realized peak normalized load.
_PRESET_WINDOWS = {
    "scratch-like": (5.2, 6.0),
    "upcycled-like": (2.0, 2.8),
}
_MAX_EXPAND = 24
_MAX_BISECT = 60


class TraceError(ValueError):
    """Malformed or invalid routing trace."""


class GenerationError(RuntimeError):
    """A synthetic preset could not reach its calibration target."""

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved peak normalized load {achieved:.4f})")
        self.achieved = achieved


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    layer_id: int
    t: int
    n: int
    k: int
    logits: np.ndarray

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64, copy=True)
        if logits.ndim != 2:
            raise TraceError(f"logits must be 2-D, got shape {logits.shape}")
        if self.t < 1 or self.n < 1:
            raise TraceError(f"need t >= 1 and n >= 1, got t={self.t}, n={self.n}")
        if not 1 <= self.k:
            raise TraceError(f"k must be >= 1, got {self.k}")
        if self.k > self.n:
            raise TraceError(f"k exceeds n ({self.k} > {self.n})")
        if logits.shape != (self.t, self.n):
            raise TraceError(
                f"logits shape {logits.shape} does not match (t, n) = ({self.t}, {self.n})"
            )
        if not np.all(np.isfinite(logits)):
            bad = np.argwhere(~np.isfinite(logits))[0]
            raise TraceError(f"non-finite logit at row {bad[0]}, column {bad[1]}")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            (self.layer_id, self.t, self.n, self.k) == (other.layer_id, other.t, other.n, other.k)
            and np.array_equal(self.logits, other.logits)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def expected_load(self) -> float:
        return self.t * self.k / self.n

    def to_record(self) -> dict:
        return {
            "layer": self.layer_id,
            "t": self.t,
            "n": self.n,
            "k": self.k,
            "logits": self.logits.tolist(),
        }


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters for :func:`generate_synthetic`.

    ``preset="uniform"`` uses ``skew`` as given (0 gives balanced routing).
    The other presets ignore ``skew`` and calibrate the bias scale until the
    routed peak load lands in the preset's window.
    """

    t: int
    n: int
    k: int
    skew: float = 0.0
    seed: int = 0
    preset: Preset = "uniform"
    layer_id: int = 0

    def __post_init__(self):
        if self.t < 1 or self.n < 1 or not 1 <= self.k <= self.n:
            raise TraceError(f"invalid sizes t={self.t}, n={self.n}, k={self.k}"
                             + (" (k exceeds n)" if self.k > self.n else ""))
        if not (self.skew >= 0 and math.isfinite(self.skew)):
            raise TraceError(f"skew must be finite and >= 0, got {self.skew}")
        if not 0 <= self.seed < 2**64:
            raise TraceError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.preset not in PRESETS:
            raise TraceError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")


def record_to_trace(record: dict, where: str = "record") -> RoutingTrace:
    if not isinstance(record, dict):
        raise TraceError(f"{where}: expected a JSON object")
    for key in ("layer", "t", "n", "k", "logits"):
        if key not in record:
            raise TraceError(f"{where}: missing field {key!r}")
    for key in ("layer", "t", "n", "k"):
        if not isinstance(record[key], int) or isinstance(record[key], bool):
            raise TraceError(f"{where}: field {key!r} must be an integer")
    rows = record["logits"]
    if not isinstance(rows, list) or any(not isinstance(r, list) for r in rows):
        raise TraceError(f"{where}: field 'logits' must be an array of arrays")
    t, n = record["t"], record["n"]
    if len(rows) != t:
        raise TraceError(f"{where}: field 'logits' has {len(rows)} rows, expected t={t}")
    for i, r in enumerate(rows):
        if len(r) != n:
            raise TraceError(f"{where}: field 'logits' row {i} has {len(r)} entries, expected n={n}")
        for v in r:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise TraceError(f"{where}: field 'logits' row {i} holds non-numeric value {v!r}")
    logits = np.array(rows, dtype=np.float64).reshape(t, n)
    try:
        return RoutingTrace(record["layer"], t, n, record["k"], logits)
    except TraceError as exc:
        raise TraceError(f"{where}: {exc}") from None


def load_traces(path: str | os.PathLike) -> list[RoutingTrace]:
    """Load every layer record from a JSON Lines trace file."""
    traces: list[RoutingTrace] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{where}: malformed JSON ({exc.msg})") from None
            trace = record_to_trace(record, where)
            if trace.layer_id in seen:
                raise TraceError(f"{where}: duplicate layer id {trace.layer_id}")
            seen.add(trace.layer_id)
            traces.append(trace)
    if not traces:
        raise TraceError(f"{path}: no layer records")
    return traces


def load_trace(path: str | os.PathLike, layer: Optional[int] = None) -> RoutingTrace:
    """Load one layer. ``layer`` is required when the file holds several."""
    traces = load_traces(path)
    if layer is None:
        if len(traces) > 1:
            raise TraceError(f"{path}: holds {len(traces)} layers; select one with layer=")
        return traces[0]
    for tr in traces:
        if tr.layer_id == layer:
            return tr
    raise TraceError(f"{path}: no layer {layer}")


def save_traces(traces: Iterable[RoutingTrace], path: str | os.PathLike) -> None:
    traces = list(traces)
    ids = [tr.layer_id for tr in traces]
    if len(set(ids)) != len(ids):
        raise TraceError(f"duplicate layer ids in {ids}")
    lines = []
    for tr in traces:
        if not isinstance(tr, RoutingTrace):
            raise TraceError(f"expected RoutingTrace, got {type(tr).__name__}")
        lines.append(json.dumps(tr.to_record(), allow_nan=False, separators=(",", ":")))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write trace to {path}: {exc.strerror}") from exc


def save_trace(trace: RoutingTrace, path: str | os.PathLike) -> None:
    save_traces([trace], path)


def peak_normalized_load(trace: RoutingTrace) -> float:
    """max_i N_i / N̄ after softmax + top-k routing."""
    from capmoe.gating import expert_load, softmax_rows, topk_select

    loads = expert_load(topk_select(softmax_rows(trace), trace.k), trace.n)
    return float(loads.max() / trace.expected_load)


def _draws(spec: SyntheticSpec):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.layer_id]))
    noise = rng.standard_normal((spec.t, spec.n))
    # Heavy-tailed per-expert popularity; a handful of experts dominate.
    popularity = rng.pareto(0.7, size=spec.n)
    popularity -= popularity.mean()
    return noise, popularity


def _build(spec: SyntheticSpec, noise, popularity, scale: float) -> RoutingTrace:
    return RoutingTrace(spec.layer_id, spec.t, spec.n, spec.k, noise + scale * popularity)


def generate_synthetic(spec: SyntheticSpec) -> RoutingTrace:
    """Deterministic synthetic trace: Gaussian token logits plus per-expert bias."""
    noise, popularity = _draws(spec)
    if spec.preset == "uniform":
        return _build(spec, noise, popularity, spec.skew)

    low, high = _PRESET_WINDOWS[spec.preset]
    ceiling = spec.n / spec.k
    if ceiling <= low:
        raise GenerationError(
            f"preset {spec.preset} needs n/k > {low}, got n/k = {ceiling:g}", ceiling
        )
    high = min(high, ceiling)

    def peak(scale):
        tr = _build(spec, noise, popularity, scale)
        return tr, peak_normalized_load(tr)

    # Peak load grows with the bias scale: expand until the lower edge of the
    # window is passed, then bisect on the scale.
    lo_s, hi_s = 0.0, 1.0
    tr, p = peak(hi_s)
    for _ in range(_MAX_EXPAND):
        if p >= low:
            break
        lo_s, hi_s = hi_s, 2 * hi_s
        tr, p = peak(hi_s)
    if p < low:
        raise GenerationError(f"preset {spec.preset} cannot reach peak {low}", p)
    for _ in range(_MAX_BISECT):
        if low <= p <= high:
            return tr
        mid = 0.5 * (lo_s + hi_s)
        tr, p = peak(mid)
        if p < low:
            lo_s = mid
        elif p > high:
            hi_s = mid
    raise GenerationError(f"preset {spec.preset} missed target window [{low}, {high}]", p)
