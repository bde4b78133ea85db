"""Command-line entry point.

Subcommands mirror the pipeline stages: simulate, project, train, eval,
ablate, report.  Every stage is derived deterministically from the config
and seed; later stages load earlier artifacts from the output directory
when present and recompute them otherwise.

Exit codes: 0 success, 2 validation/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import gdn, harness, hgn, projection, volterra
from .errors import NpvolError, NumericalError, ValidationError
from .rng import derive_seed

PATHS_FILE = "paths.npvs"
TARGETS_FILE = "targets.nppt"
EXPERTS_FILE = "experts.npy"
HYPER_FILE = "hypernet.nphg"
REPORT_FILE = "report.json"


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="npvol",
        description="Simulate Volterra processes, project them onto Gaussian "
        "measures, and train geometric networks on the projections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out-dir", default="out", help="artifact directory")
        p.add_argument(
            "--mode",
            help="projection mode: closed_form or mc:<n>",
        )
        p.add_argument("--ci", choices=["sd", "normal"], help="confidence interval mode")

    for name, desc in [
        ("simulate", "simulate paths and write the path-set file plus CSV"),
        ("project", "compute projection targets for the simulated paths"),
        ("train", "train per-time experts and the hypernetwork"),
        ("eval", "evaluate trained models on the test times and write the report"),
        ("ablate", "run a pipeline per value along one ablation axis"),
        ("report", "re-emit CSVs from a stored report.json"),
    ]:
        p = sub.add_parser(name, help=desc)
        common(p)
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=harness.ABLATION_AXES)
            p.add_argument(
                "--values",
                required=True,
                help="JSON list of axis values, e.g. '[0, 0.5, 1]'",
            )
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        config = harness.load_config(args.config)
    else:
        config = harness.ExperimentConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.mode is not None:
        projection.ProjectionMode.parse(args.mode)
        config = replace(config, projection=args.mode)
    if args.ci is not None:
        config = replace(config, ci_mode=args.ci)
    return config


def _simulate(config, out_dir):
    spec = harness.experiment_process(config)
    paths = volterra.simulate_paths(
        spec, config.n_paths, config.horizon, derive_seed(config.seed, "simulate")
    )
    paths.save(os.path.join(out_dir, PATHS_FILE))
    paths.to_csv(os.path.join(out_dir, "paths.csv"))
    return spec, paths


def _load_or_simulate(config, out_dir):
    spec = harness.experiment_process(config)
    path = os.path.join(out_dir, PATHS_FILE)
    if os.path.exists(path):
        return spec, volterra.PathSet.load(path)
    return _simulate(config, out_dir)


def _project(config, out_dir):
    spec, paths = _load_or_simulate(config, out_dir)
    mode = projection.ProjectionMode.parse(config.projection)
    targets = projection.build_projection_targets(spec, paths, mode)
    targets.save(os.path.join(out_dir, TARGETS_FILE))
    targets.to_csv(os.path.join(out_dir, "targets.csv"))
    return spec, paths, targets


def cmd_simulate(config, out_dir):
    _, paths = _simulate(config, out_dir)
    print(f"wrote {paths.n_paths} paths of horizon {paths.horizon} to {out_dir}")
    return 0


def cmd_project(config, out_dir):
    _project(config, out_dir)
    print(f"wrote projection targets to {out_dir}")
    return 0


def cmd_train(config, out_dir):
    # artifacts are flushed stage by stage, so a failed training run still
    # leaves the simulated paths and targets on disk
    spec, paths = harness.simulate_stage(config)
    paths.save(os.path.join(out_dir, PATHS_FILE))
    targets = harness.project_stage(config, spec, paths)
    targets.save(os.path.join(out_dir, TARGETS_FILE))
    report, art = harness.train_and_evaluate(config, spec, paths, targets)
    np.save(os.path.join(out_dir, EXPERTS_FILE), art.theta_seq)
    gdn.save_checkpoint(
        os.path.join(out_dir, "expert_last.npgd"), art.theta_seq[-1], art.arch
    )
    hgn.save_checkpoint(
        os.path.join(out_dir, HYPER_FILE), art.hyper.vartheta, art.hyper.z0, art.hgn_spec
    )
    report.save(os.path.join(out_dir, REPORT_FILE))
    harness.emit_report(report, out_dir)
    print(f"trained {art.theta_seq.shape[0]} experts; report in {out_dir}")
    return 0


def cmd_eval(config, out_dir):
    experts_path = os.path.join(out_dir, EXPERTS_FILE)
    hyper_path = os.path.join(out_dir, HYPER_FILE)
    if not (os.path.exists(experts_path) and os.path.exists(hyper_path)):
        raise ValidationError(f"run `npvol train --out-dir {out_dir}` first")
    theta_seq = np.load(experts_path)
    vartheta, _, spec_h = hgn.load_checkpoint(hyper_path)
    spec, paths, targets = _project(config, out_dir)
    datasets, _ = harness._per_time_datasets(config, paths, targets)
    test_times = list(range(config.train_split, config.horizon + 1))
    n = float(config.n_paths)
    rows = []
    g = {t: gdn.imse_loss(theta_seq[t], spec_h.gdn_arch, datasets[t]) / n for t in test_times}
    h1 = hgn.evaluate_hgn(spec_h, vartheta, theta_seq, datasets, test_times, "one_step")
    hr = hgn.evaluate_hgn(
        spec_h, vartheta, theta_seq, datasets, test_times, "recurrent",
        roll_from=config.train_split - 1,
    )
    for t in test_times:
        rows.append((t, g[t], h1[t] / n, hr[t] / n))
    out = os.path.join(out_dir, "eval_per_time.csv")
    with open(out, "w") as fh:
        fh.write("t,gdn_loss,hgn1_loss,hgnR_loss\n")
        for t, a, b, c in rows:
            fh.write(f"{t},{a!r},{b!r},{c!r}\n")
    print(f"wrote {out}")
    return 0


def cmd_ablate(config, out_dir, axis, values_json):
    try:
        values = json.loads(values_json)
    except json.JSONDecodeError as e:
        raise ValidationError(f"--values is not valid JSON: {e}") from e
    if not isinstance(values, list) or not values:
        raise ValidationError("--values must be a nonempty JSON list")
    entries = harness.ablate(config, axis, values)
    harness.emit_comparison(entries, out_dir, stem=f"ablation_{axis}")
    for i, entry in enumerate(entries):
        if entry.report is not None:
            entry.report.save(os.path.join(out_dir, f"report_{axis}_{i}.json"))
    failures = [e for e in entries if e.report is None]
    print(
        f"{len(entries) - len(failures)}/{len(entries)} variations succeeded; "
        f"summary in {out_dir}"
    )
    return 0 if not failures else 3


def cmd_report(out_dir):
    path = os.path.join(out_dir, REPORT_FILE)
    if not os.path.exists(path):
        raise ValidationError(f"no {REPORT_FILE} in {out_dir}")
    report = harness.Report.load(path)
    written = harness.emit_report(report, out_dir)
    print("wrote " + ", ".join(written))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args) if args.command != "report" else None
        os.makedirs(args.out_dir, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(config, args.out_dir)
        if args.command == "project":
            return cmd_project(config, args.out_dir)
        if args.command == "train":
            return cmd_train(config, args.out_dir)
        if args.command == "eval":
            return cmd_eval(config, args.out_dir)
        if args.command == "ablate":
            return cmd_ablate(config, args.out_dir, args.axis, args.values)
        if args.command == "report":
            return cmd_report(args.out_dir)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except NpvolError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
