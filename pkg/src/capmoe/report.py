"""Layer load analysis, policy sweeps and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from capmoe.capacity import (
    CapacityPolicy,
    METRICS,
    capacity_limit,
    drop_overflow,
    dropped_fraction,
    expert_drop,
)
from capmoe.gating import expected_load, expert_load, softmax_rows, topk_select
from capmoe.latsim import DEFAULT_RHO, DeviceMap, LatencyModel, device_loads, speedup_report
from capmoe.reroute import RerouteConfig, reroute
from capmoe.toymoe import ToyMoELayer, output_divergence
from capmoe.trace import RoutingTrace

CSV_HEADER = (
    "policy",
    "gamma",
    "capacity",
    "dropped_fraction",
    "max_device_load",
    "layer_speedup",
    "e2e_speedup",
    "retained_fraction",
    "divergence",
)
ANALYZE_CSV_HEADER = ("layer", "gamma", "dropped_fraction", "max_normalized")


@dataclass(frozen=True)
class LayerLoadReport:
    layer_id: int
    normalized_loads: list[float]
    max_normalized: float
    gamma_to_DT: list[tuple[float, float]]


@dataclass(frozen=True)
class Policy:
    """One way of enforcing capacity: ``drop``, ``reroute`` or ``expert_drop``."""

    kind: Literal["drop", "reroute", "expert_drop"]
    metric: str = "score"
    rounds: int = 2
    fraction: float = 0.1
    seed: int = 0

    @property
    def name(self) -> str:
        if self.kind == "drop":
            return f"drop:{self.metric}"
        if self.kind == "reroute":
            return f"reroute:{self.rounds}"
        return f"expert_drop:{self.fraction!r}"

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "Policy":
        """``drop:<metric>``, ``reroute:<rounds>`` or ``expert_drop:<fraction>``."""
        kind, _, arg = text.partition(":")
        if kind == "drop":
            metric = arg or "score"
            if metric not in METRICS:
                raise ValueError(f"unknown metric {metric!r} in policy {text!r}")
            return cls("drop", metric=metric, seed=seed)
        if kind == "reroute":
            rounds = int(arg) if arg else 2
            if rounds < 1:
                raise ValueError(f"reroute rounds must be >= 1 in policy {text!r}")
            return cls("reroute", rounds=rounds, seed=seed)
        if kind == "expert_drop":
            return cls("expert_drop", fraction=float(arg) if arg else 0.1, seed=seed)
        raise ValueError(f"unknown policy {text!r}")


@dataclass(frozen=True)
class SweepRow:
    policy: str
    gamma: float
    capacity: float
    dropped_fraction: float
    max_device_load: int
    layer_speedup: float
    e2e_speedup: float
    retained_fraction: float
    divergence: float


@dataclass
class SweepResult:
    meta: dict
    rows: list[SweepRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(_restore(d["meta"]), [SweepRow(**_restore(r)) for r in d["rows"]])


def _restore(obj):
    # Inverse of _json_safe.
    if obj == "inf":
        return math.inf
    if isinstance(obj, dict):
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return obj


def analyze_layer(trace: RoutingTrace, gammas: Sequence[float]) -> LayerLoadReport:
    if not gammas:
        raise ValueError("need at least one gamma")
    scores = softmax_rows(trace)
    loads = expert_load(topk_select(scores, trace.k), trace.n)
    nbar = float(expected_load(trace.t, trace.k, trace.n))
    normalized = (loads / nbar).tolist()
    pairs = [
        (float(g), float(dropped_fraction(loads, capacity_limit(g, trace.t, trace.k, trace.n))))
        for g in gammas
    ]
    return LayerLoadReport(trace.layer_id, normalized, max(normalized), pairs)


def _apply(policy: Policy, scores, baseline, k, capacity, layer_id):
    """Return the constrained AssignmentSet for one (policy, capacity) cell."""
    if policy.kind == "drop":
        return drop_overflow(
            scores, baseline, capacity, CapacityPolicy(1.0, policy.metric, policy.seed), layer_id
        ).retained
    if policy.kind == "reroute":
        return reroute(scores, RerouteConfig(k, capacity, policy.rounds)).final
    loads = expert_load(baseline, scores.shape[1])
    return expert_drop(baseline, loads, policy.fraction).retained


def run_sweep(
    trace: RoutingTrace,
    policies: Sequence[Policy],
    gammas: Sequence[float],
    device_map: Optional[DeviceMap] = None,
    model: LatencyModel = LatencyModel(),
    rho: float = DEFAULT_RHO,
    seed: int = 0,
    d_model: int = 16,
) -> SweepResult:
    """One row per (policy, gamma); rows within a policy run from largest gamma down."""
    t, n, k = trace.t, trace.n, trace.k
    device_map = device_map or DeviceMap.one_per_device(n)
    if device_map.num_experts != n:
        raise ValueError(f"device map covers {device_map.num_experts} experts, trace has {n}")

    scores = softmax_rows(trace)
    baseline = topk_select(scores, k)
    base_loads = expert_load(baseline, n)
    total = len(baseline)

    rng = np.random.default_rng(np.random.SeedSequence([seed, trace.layer_id]))
    layer = ToyMoELayer.random(n, d_model, seed=int(rng.integers(2**63)))
    x = rng.standard_normal((t, d_model))
    y_base = layer.forward(x, baseline)

    result = SweepResult(
        meta={
            "layer": trace.layer_id,
            "t": t,
            "n": n,
            "k": k,
            "expected_load": float(expected_load(t, k, n)),
            "seed": seed,
            "device_map": device_map.describe(),
            "latency_model": {"c0": model.c0, "c1": model.c1},
            "rho": rho,
            "policies": [p.name for p in policies],
            "gammas": [float(g) for g in gammas],
            "note": "speedups are predictions of the affine max-device-load latency model",
        }
    )
    for policy in policies:
        for g in sorted(gammas, reverse=True):
            cap = capacity_limit(g, t, k, n)
            try:
                constrained = _apply(policy, scores, baseline, k, cap, trace.layer_id)
                loads = expert_load(constrained, n)
                rep = speedup_report(base_loads, loads, device_map, model, rho)
            except (ValueError, ZeroDivisionError) as exc:
                raise type(exc)(f"policy {policy.name}, gamma {g}: {exc}") from exc
            if policy.kind == "expert_drop":
                dt = 1 - len(constrained) / total
            else:
                dt = float(dropped_fraction(base_loads, cap))
            divergence, _ = output_divergence(y_base, layer.forward(x, constrained))
            result.rows.append(
                SweepRow(
                    policy=policy.name,
                    gamma=float(g),
                    capacity=float(cap),
                    dropped_fraction=dt,
                    max_device_load=int(device_loads(loads, device_map).max()),
                    layer_speedup=rep.layer_speedup,
                    e2e_speedup=rep.end_to_end_speedup,
                    retained_fraction=len(constrained) / total,
                    divergence=divergence,
                )
            )
    return result


def _fmt(v) -> str:
    # repr gives the shortest round-trip decimal; "inf" for the unbounded capacity.
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in result.rows:
        w.writerow([_fmt(getattr(r, h)) for h in CSV_HEADER])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def sweep_json(result: SweepResult) -> str:
    return json.dumps(_json_safe(result.to_dict()), indent=2, allow_nan=False) + "\n"


def layer_reports_csv(reports: Sequence[LayerLoadReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANALYZE_CSV_HEADER)
    for rep in reports:
        for g, dt in rep.gamma_to_DT:
            w.writerow([rep.layer_id, _fmt(g), _fmt(dt), _fmt(rep.max_normalized)])
    return buf.getvalue()


def layer_reports_json(reports: Sequence[LayerLoadReport]) -> str:
    payload = [
        {
            "layer": r.layer_id,
            "normalized_loads": r.normalized_loads,
            "max_normalized": r.max_normalized,
            "gamma_to_DT": [[g, dt] for g, dt in r.gamma_to_DT],
        }
        for r in reports
    ]
    return json.dumps(_json_safe(payload), indent=2, allow_nan=False) + "\n"


def _write_text(text: str, path: str | os.PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report to {path}: {exc.strerror}") from exc


def write_report(result: SweepResult, path: str | os.PathLike, format: str = "csv") -> None:
    if format == "csv":
        _write_text(sweep_csv(result), path)
    elif format == "json":
        _write_text(sweep_json(result), path)
    else:
        raise ValueError(f"unknown format {format!r}; expected csv or json")


def read_report(path: str | os.PathLike) -> SweepResult:
    with open(path, encoding="utf-8") as fh:
        return SweepResult.from_dict(json.load(fh))
