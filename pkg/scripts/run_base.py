#!/usr/bin/env python3
"""Run the desk-scale base experiment and write its report + CSVs."""

import argparse

from npvol import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out-dir", default="out/base")
    args = ap.parse_args()

    cfg = harness.desk_base_config(seed=args.seed)
    report = harness.run_pipeline(cfg)
    files = harness.emit_report(report, args.out_dir)

    print(f"config hash: {report.config_hash}")
    for model, stats in report.summary.items():
        print(
            f"{model:>14s}: mean {stats['mean']:.3e} "
            f"ci [{stats['ci_lo']:.3e}, {stats['ci_hi']:.3e}]"
        )
    print(f"hypernetwork pair MSE: {report.hyper_mse:.3e}")
    print("wrote: " + ", ".join(files))


if __name__ == "__main__":
    main()
