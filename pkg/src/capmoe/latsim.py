"""Expert-parallel latency model.

Layer latency is affine in the busiest device's token count. All speedups
reported here are predictions of that model, not measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from capmoe.gating import expected_load

# Serial-fraction calibration: 1 / ((1 - rho) + rho / 1.94) = 1.37.
DEFAULT_RHO = 0.557


@dataclass(frozen=True, eq=False)
class DeviceMap:
    num_devices: int
    placement: np.ndarray  # expert index -> device index

    def __post_init__(self):
        placement = np.asarray(self.placement, dtype=np.int64)
        if self.num_devices < 1:
            raise ValueError("num_devices must be >= 1")
        if placement.ndim != 1 or len(placement) == 0:
            raise ValueError("placement must be a non-empty 1-D vector")
        if placement.min() < 0 or placement.max() >= self.num_devices:
            raise ValueError(f"placement holds device ids outside [0, {self.num_devices})")
        placement.setflags(write=False)
        object.__setattr__(self, "placement", placement)

    @property
    def num_experts(self) -> int:
        return len(self.placement)

    @classmethod
    def round_robin(cls, n: int, num_devices: int) -> "DeviceMap":
        return cls(num_devices, np.arange(n) % num_devices)

    @classmethod
    def one_per_device(cls, n: int) -> "DeviceMap":
        return cls.round_robin(n, n)

    @classmethod
    def from_experts_per_device(cls, n: int, experts_per_device: int) -> "DeviceMap":
        if experts_per_device < 1:
            raise ValueError("experts_per_device must be >= 1")
        return cls.round_robin(n, math.ceil(n / experts_per_device))

    def describe(self) -> dict:
        return {"num_devices": self.num_devices, "placement": self.placement.tolist()}


@dataclass(frozen=True)
class LatencyModel:
    c0: float = 0.0
    c1: float = 1.0

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError(f"per-token cost c1 must be > 0, got {self.c1}")
        if not self.c0 >= 0:
            raise ValueError(f"fixed overhead c0 must be >= 0, got {self.c0}")


@dataclass(frozen=True)
class SpeedupReport:
    layer_speedup: float
    end_to_end_speedup: float
    baseline_max_device_load: int
    constrained_max_device_load: int
    moe_time_fraction: float


def device_loads(loads: Sequence[int], device_map: DeviceMap) -> np.ndarray:
    loads = np.asarray(loads, dtype=np.int64)
    if len(loads) != device_map.num_experts:
        raise ValueError(f"{len(loads)} expert loads for a map over {device_map.num_experts} experts")
    return np.bincount(device_map.placement, weights=loads, minlength=device_map.num_devices).astype(np.int64)


def layer_latency(dev: Sequence[int], model: LatencyModel) -> float:
    dev = np.asarray(dev)
    if dev.size == 0:
        raise ValueError("need at least one device")
    return model.c0 + model.c1 * float(dev.max())


def max_load_bounds(t: int, k: int, n: int, gamma: float = math.inf) -> tuple[float, float]:
    """Range of the largest per-expert load, uncapped or under capacity factor gamma."""
    nbar = expected_load(t, k, n)
    if math.isinf(gamma):
        return float(nbar), float(n * nbar / k)
    cap = Fraction(repr(float(gamma))) * nbar
    if gamma >= 1:
        return float(nbar), float(cap)
    return float(cap), float(cap)


def layer_speedup(
    baseline_loads: Sequence[int],
    constrained_loads: Sequence[int],
    device_map: DeviceMap,
    model: LatencyModel = LatencyModel(),
) -> float:
    base = layer_latency(device_loads(baseline_loads, device_map), model)
    constrained = layer_latency(device_loads(constrained_loads, device_map), model)
    if constrained == 0:
        raise ZeroDivisionError("constrained layer latency is zero")
    return base / constrained


def end_to_end_speedup(s: float, rho: float = DEFAULT_RHO) -> float:
    """Amdahl composition: only the MoE share rho of runtime is accelerated by s."""
    if not s > 0:
        raise ValueError(f"layer speedup must be > 0, got {s}")
    if not 0 <= rho <= 1:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    return 1.0 / ((1.0 - rho) + rho / s)


def calibrate_rho(layer: float, end_to_end: float) -> float:
    """Solve end_to_end_speedup(layer, rho) == end_to_end for rho."""
    if layer == 1:
        raise ValueError("layer speedup of 1 carries no information about rho")
    return (1.0 - 1.0 / end_to_end) / (1.0 - 1.0 / layer)


def speedup_report(
    baseline_loads: Sequence[int],
    constrained_loads: Sequence[int],
    device_map: DeviceMap,
    model: LatencyModel = LatencyModel(),
    rho: float = DEFAULT_RHO,
) -> SpeedupReport:
    s = layer_speedup(baseline_loads, constrained_loads, device_map, model)
    return SpeedupReport(
        layer_speedup=s,
        end_to_end_speedup=end_to_end_speedup(s, rho),
        baseline_max_device_load=int(device_loads(baseline_loads, device_map).max()),
        constrained_max_device_load=int(device_loads(constrained_loads, device_map).max()),
        moe_time_fraction=rho,
    )
