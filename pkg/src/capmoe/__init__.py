"""Capacity-aware MoE routing: token drop, token reroute and an expert-parallel latency model."""

from capmoe.capacity import (
    CapacityPolicy,
    DropResult,
    UNBOUNDED,
    capacity_limit,
    drop_overflow,
    dropped_fraction,
    expert_drop,
)
from capmoe.gating import AssignmentSet, expected_load, expert_load, softmax_rows, topk_select
from capmoe.latsim import (
    DeviceMap,
    LatencyModel,
    SpeedupReport,
    device_loads,
    end_to_end_speedup,
    layer_latency,
    layer_speedup,
    max_load_bounds,
)
from capmoe.reroute import RerouteConfig, RerouteResult, reroute, reroute_sweep
from capmoe.report import Policy, analyze_layer, run_sweep, write_report
from capmoe.toymoe import ToyMoELayer, output_divergence
from capmoe.trace import (
    RoutingTrace,
    SyntheticSpec,
    generate_synthetic,
    load_trace,
    load_traces,
    save_trace,
    save_traces,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentSet",
    "CapacityPolicy",
    "DeviceMap",
    "DropResult",
    "LatencyModel",
    "Policy",
    "RerouteConfig",
    "RerouteResult",
    "RoutingTrace",
    "SpeedupReport",
    "SyntheticSpec",
    "ToyMoELayer",
    "UNBOUNDED",
    "analyze_layer",
    "capacity_limit",
    "device_loads",
    "drop_overflow",
    "dropped_fraction",
    "end_to_end_speedup",
    "expected_load",
    "expert_drop",
    "expert_load",
    "generate_synthetic",
    "layer_latency",
    "layer_speedup",
    "load_trace",
    "load_traces",
    "max_load_bounds",
    "output_divergence",
    "reroute",
    "reroute_sweep",
    "run_sweep",
    "save_trace",
    "save_traces",
    "softmax_rows",
    "topk_select",
    "write_report",
]
