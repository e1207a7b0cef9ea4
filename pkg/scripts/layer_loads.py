"""Per-layer load imbalance of a multi-layer trace file, or of freshly generated layers."""

import argparse

from capmoe.report import analyze_layer
from capmoe.trace import SyntheticSpec, generate_synthetic, load_traces


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trace", default=None, help="JSONL trace; if omitted, generate --layers layers")
    ap.add_argument("--preset", default="scratch-like")
    ap.add_argument("--layers", type=int, default=6)
    ap.add_argument("--t", type=int, default=2048)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gammas", default="3.0,2.0,1.5,1.0")
    args = ap.parse_args()

    gammas = [float(g) for g in args.gammas.split(",")]
    if args.trace:
        traces = load_traces(args.trace)
    else:
        traces = [generate_synthetic(SyntheticSpec(args.t, args.n, args.k, seed=args.seed,
                                                   preset=args.preset, layer_id=i))
                  for i in range(args.layers)]

    print("layer  peak/N-bar  " + "  ".join(f"DT@{g:<4}" for g in gammas))
    for tr in traces:
        rep = analyze_layer(tr, gammas)
        dts = "  ".join(f"{dt:7.4f}" for _, dt in rep.gamma_to_DT)
        print(f"{rep.layer_id:>5}  {rep.max_normalized:10.3f}  {dts}")


if __name__ == "__main__":
    main()
