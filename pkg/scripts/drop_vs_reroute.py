"""Sweep capacity factors on both synthetic presets and compare drop, reroute and expert drop.

Prints a table per preset and optionally writes one CSV per preset. All
speedups are predictions of the affine latency model.
"""

import argparse
from pathlib import Path

from capmoe.latsim import DeviceMap
from capmoe.report import Policy, run_sweep, sweep_csv
from capmoe.trace import SyntheticSpec, generate_synthetic, peak_normalized_load

POLICIES = ["drop:score", "drop:order", "drop:random", "reroute:2", "reroute:4", "expert_drop:0.125"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--t", type=int, default=4096)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--gammas", default="inf,3.0,2.0,1.5,1.0")
    ap.add_argument("--experts-per-device", type=int, default=1)
    ap.add_argument("--out-dir", type=Path, default=None)
    args = ap.parse_args()

    gammas = [float(g) for g in args.gammas.split(",")]
    policies = [Policy.parse(p, seed=args.seed) for p in POLICIES]
    dmap = DeviceMap.from_experts_per_device(args.n, args.experts_per_device)

    for preset in ("scratch-like", "upcycled-like"):
        tr = generate_synthetic(SyntheticSpec(args.t, args.n, args.k, seed=args.seed, preset=preset))
        result = run_sweep(tr, policies, gammas, device_map=dmap, seed=args.seed)
        print(f"\n{preset}: t={tr.t} n={tr.n} k={tr.k} peak={peak_normalized_load(tr):.2f} x N-bar")
        print(f"{'policy':<18}{'gamma':>7}{'DT':>9}{'kept':>8}{'layer x':>9}{'e2e x':>8}{'div':>9}")
        for r in result.rows:
            print(f"{r.policy:<18}{r.gamma:>7}{r.dropped_fraction:>9.4f}{r.retained_fraction:>8.4f}"
                  f"{r.layer_speedup:>9.3f}{r.e2e_speedup:>8.3f}{r.divergence:>9.4f}")
        if args.out_dir is not None:
            args.out_dir.mkdir(parents=True, exist_ok=True)
            (args.out_dir / f"{preset}.csv").write_text(sweep_csv(result))


if __name__ == "__main__":
    main()
