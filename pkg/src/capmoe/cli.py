"""Command-line entry point: ``capmoe generate | analyze | simulate``."""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from capmoe.capacity import METRICS
from capmoe.latsim import DEFAULT_RHO, DeviceMap, LatencyModel
from capmoe.report import (
    Policy,
    analyze_layer,
    layer_reports_csv,
    layer_reports_json,
    run_sweep,
    sweep_csv,
    sweep_json,
)
from capmoe.trace import (
    PRESETS,
    GenerationError,
    SyntheticSpec,
    TraceError,
    generate_synthetic,
    load_trace,
    load_traces,
    peak_normalized_load,
    save_traces,
)


class CliError(Exception):
    pass


def parse_gammas(text: str) -> list[float]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            g = float(part)
        except ValueError:
            raise CliError(f"bad gamma {part!r}") from None
        if not g > 0:
            raise CliError(f"gamma must be > 0, got {part}")
        out.append(g)
    if not out:
        raise CliError("no gamma values given")
    return out


@dataclass
class CliConfig:
    subcommand: str
    trace_path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    layer: Optional[int] = None
    gammas: list[float] = field(default_factory=lambda: [math.inf, 3.0, 2.0, 1.5, 1.0])
    metric: str = "score"
    reroute_rounds: Optional[int] = None
    expert_drop: Optional[float] = None
    policies: list[str] = field(default_factory=list)
    devices: Optional[int] = None
    experts_per_device: Optional[int] = None
    c0: float = 0.0
    c1: float = 1.0
    rho: float = DEFAULT_RHO
    seed: int = 0
    out: Optional[str] = None
    format: str = "csv"

    def validate(self):
        if self.subcommand in ("analyze", "simulate"):
            if (self.trace_path is None) == (self.synthetic is None):
                raise CliError("give exactly one of --trace or synthetic flags (--t/--n/--k)")
        if any(not g > 0 for g in self.gammas):
            raise CliError("gamma values must be > 0")

    def policy_set(self) -> list[Policy]:
        if self.policies:
            return [Policy.parse(p, seed=self.seed) for p in self.policies]
        out = []
        if self.reroute_rounds is not None:
            out.append(Policy("reroute", rounds=self.reroute_rounds, seed=self.seed))
        else:
            out.append(Policy("drop", metric=self.metric, seed=self.seed))
        if self.expert_drop is not None:
            out.append(Policy("expert_drop", fraction=self.expert_drop, seed=self.seed))
        return out

    def device_map(self, n: int) -> DeviceMap:
        d, e = self.devices, self.experts_per_device
        if d is None and e is None:
            return DeviceMap.one_per_device(n)
        if e is None:
            return DeviceMap.round_robin(n, d)
        dm = DeviceMap.from_experts_per_device(n, e)
        if d is not None and d != dm.num_devices:
            raise CliError(
                f"--devices {d} with --experts-per-device {e} does not cover n={n} experts "
                f"(needs {dm.num_devices} devices)"
            )
        return dm


def _add_synthetic_flags(p: argparse.ArgumentParser, required: bool):
    p.add_argument("--t", type=int, required=required, help="tokens per layer")
    p.add_argument("--n", type=int, required=required, help="number of experts")
    p.add_argument("--k", type=int, required=required, help="experts per token")
    p.add_argument("--skew", type=float, default=0.0, help="bias scale for preset 'uniform'")
    p.add_argument("--preset", choices=PRESETS, default="uniform")


def _add_output_flags(p: argparse.ArgumentParser):
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capmoe", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("generate", help="write a synthetic routing trace")
    _add_synthetic_flags(gen, required=True)
    gen.add_argument("--layers", type=int, default=1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    ana = sub.add_parser("analyze", help="normalized loads and dropped fraction per gamma")
    ana.add_argument("--trace")
    _add_synthetic_flags(ana, required=False)
    ana.add_argument("--gammas", default="3.0,2.0,1.5,1.0")
    ana.add_argument("--seed", type=int, default=0)
    _add_output_flags(ana)

    sim = sub.add_parser("simulate", help="sweep capacity policies through the latency model")
    sim.add_argument("--trace")
    sim.add_argument("--layer", type=int, help="layer id for multi-layer trace files")
    _add_synthetic_flags(sim, required=False)
    sim.add_argument("--gamma", "--gammas", dest="gammas", default="inf,3.0,2.0,1.5,1.0",
                     help="comma-separated capacity factors; 'inf' is the uncapped baseline")
    sim.add_argument("--metric", choices=METRICS, default="score")
    sim.add_argument("--reroute-rounds", type=int)
    sim.add_argument("--expert-drop", type=float, help="also run Expert Drop with this fraction")
    sim.add_argument("--policy", action="append", default=[],
                     help="drop:<metric> | reroute:<rounds> | expert_drop:<fraction>; repeatable")
    sim.add_argument("--devices", type=int)
    sim.add_argument("--experts-per-device", type=int)
    sim.add_argument("--c0", type=float, default=0.0)
    sim.add_argument("--c1", type=float, default=1.0)
    sim.add_argument("--rho", type=float, default=DEFAULT_RHO)
    sim.add_argument("--seed", type=int, default=0)
    _add_output_flags(sim)
    return parser


def config_from_args(args: argparse.Namespace) -> CliConfig:
    synthetic = None
    if getattr(args, "t", None) is not None or getattr(args, "n", None) is not None:
        if None in (args.t, args.n, args.k):
            raise CliError("synthetic traces need all of --t, --n, --k")
        try:
            synthetic = SyntheticSpec(args.t, args.n, args.k, args.skew, args.seed, args.preset)
        except TraceError as exc:
            raise CliError(str(exc)) from None
    cfg = CliConfig(
        subcommand=args.subcommand,
        trace_path=getattr(args, "trace", None),
        synthetic=synthetic,
        layer=getattr(args, "layer", None),
        seed=args.seed,
        out=args.out,
        format=getattr(args, "format", "csv"),
    )
    if hasattr(args, "gammas"):
        cfg.gammas = parse_gammas(args.gammas)
    if args.subcommand == "simulate":
        cfg.metric = args.metric
        cfg.reroute_rounds = args.reroute_rounds
        cfg.expert_drop = args.expert_drop
        cfg.policies = args.policy
        cfg.devices = args.devices
        cfg.experts_per_device = args.experts_per_device
        cfg.c0, cfg.c1, cfg.rho = args.c0, args.c1, args.rho
    cfg.validate()
    return cfg


def _emit(text: str, out: Optional[str]):
    if out is None:
        sys.stdout.write(text)
        return
    try:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc.strerror}") from None


def cmd_generate(args: argparse.Namespace) -> int:
    if args.layers < 1:
        raise CliError("--layers must be >= 1")
    try:
        specs = [
            SyntheticSpec(args.t, args.n, args.k, args.skew, args.seed, args.preset, layer_id=i)
            for i in range(args.layers)
        ]
    except TraceError as exc:
        raise CliError(str(exc)) from None
    traces = [generate_synthetic(s) for s in specs]
    try:
        save_traces(traces, args.out)
    except OSError as exc:
        raise CliError(str(exc)) from None
    for tr in traces:
        print(f"layer={tr.layer_id} t={tr.t} n={tr.n} k={tr.k} "
              f"max_normalized_load={peak_normalized_load(tr):.4f}")
    return 0


def _traces(cfg: CliConfig, single: bool):
    if cfg.synthetic is not None:
        return [generate_synthetic(cfg.synthetic)]
    try:
        if single:
            if cfg.layer is None:
                return [load_traces(cfg.trace_path)[0]]
            return [load_trace(cfg.trace_path, cfg.layer)]
        return load_traces(cfg.trace_path)
    except OSError as exc:
        raise CliError(f"cannot read trace {cfg.trace_path}: {exc.strerror}") from None


def cmd_analyze(cfg: CliConfig) -> int:
    reports = [analyze_layer(tr, cfg.gammas) for tr in _traces(cfg, single=False)]
    text = layer_reports_json(reports) if cfg.format == "json" else layer_reports_csv(reports)
    _emit(text, cfg.out)
    return 0


def cmd_simulate(cfg: CliConfig) -> int:
    (trace,) = _traces(cfg, single=True)
    model = LatencyModel(cfg.c0, cfg.c1)
    result = run_sweep(trace, cfg.policy_set(), cfg.gammas, cfg.device_map(trace.n), model,
                       cfg.rho, seed=cfg.seed)
    text = sweep_json(result) if cfg.format == "json" else sweep_csv(result)
    _emit(text, cfg.out)
    best = max(result.rows, key=lambda r: r.layer_speedup)
    summary = (f"best model-predicted layer speedup {best.layer_speedup:.4f} "
               f"at gamma={best.gamma:g} ({best.policy}, retained {best.retained_fraction:.4f})")
    print(summary, file=sys.stderr if cfg.out is None else sys.stdout)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.subcommand == "generate":
            return cmd_generate(args)
        cfg = config_from_args(args)
        if cfg.subcommand == "analyze":
            return cmd_analyze(cfg)
        return cmd_simulate(cfg)
    except (CliError, TraceError, GenerationError, ValueError, ZeroDivisionError) as exc:
        print(f"capmoe {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
