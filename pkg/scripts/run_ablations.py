#!/usr/bin/env python3
"""Sweep one process parameter and tabulate test losses per variation.

Axes: mu (drift preset), lambda (factor randomness), dimension, memory
(weight on the previous state), varsigma (diffusion scale).  Set
NPV_THREADS>1 to run variations in parallel.
"""

import argparse
import json

from npvol import harness

DEFAULT_VALUES = {
    "lambda": [0.0, 0.25, 0.5, 1.0],
    "varsigma": [0.005, 0.01, 0.05, 0.1],
    "dimension": [2, 3, 5],
    "memory": [0.0, 0.1, 0.25, 0.5],
    "mu": [
        {"kind": "const", "c": 0.01},
        {"kind": "affine", "a": 0.005, "b": -0.5},
        {"kind": "expcos"},
    ],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--axis", default="lambda", choices=sorted(harness.ABLATION_AXES))
    ap.add_argument("--values", help="JSON list overriding the default grid")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out-dir", default="out/ablation")
    args = ap.parse_args()

    values = json.loads(args.values) if args.values else DEFAULT_VALUES[args.axis]
    cfg = harness.desk_base_config(seed=args.seed)
    entries = harness.ablate(cfg, args.axis, values)
    path = harness.emit_comparison(entries, args.out_dir, stem=f"ablation_{args.axis}")

    print(f"{args.axis:>10s} | {'gdn':>10s} | {'hgn 1-step':>10s} | {'hgn rec':>10s}")
    for entry in entries:
        if entry.report is None:
            print(f"{str(entry.value):>10s} | failed: {entry.error}")
            continue
        s = entry.report.summary
        print(
            f"{str(entry.value):>10s} | {s['gdn']['mean']:.3e} | "
            f"{s['hgn_one_step']['mean']:.3e} | {s['hgn_recurrent']['mean']:.3e}"
        )
    print(f"summary: {path}")


if __name__ == "__main__":
    main()
