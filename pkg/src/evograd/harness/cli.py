"""Command-line entry point: ``run``, ``sweep`` and ``summarize``.

Exit codes: 0 on success, 1 on configuration errors (every invalid field
reported at once), 2 on numeric divergence during an experiment.
"""

from __future__ import annotations

import argparse
import json
import sys

from evograd.harness import config as cfgmod
from evograd.harness import metrics, runner
from evograd.problems.rotation import DivergenceError


def _add_config_flags(p: argparse.ArgumentParser, need_experiment: bool):
    p.add_argument("--config", help="key = value config file; flags override it")
    if need_experiment:
        p.add_argument("--experiment", choices=cfgmod.EXPERIMENTS)
        p.add_argument("--method", choices=cfgmod.METHODS)
        p.add_argument("--k", action="append", type=int, metavar="K",
                       help="population size; repeat for a one_d_grid size sweep")
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--sigma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--noise-kind", dest="noise_kind", choices=cfgmod.NOISE_KINDS)
    p.add_argument("--lr", type=float)
    p.add_argument("--meta-lr", dest="meta_lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--true-angle", dest="true_angle", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--probe-steps", dest="probe_steps", type=int)
    p.add_argument("--out")
    p.add_argument("--dump-tape", dest="dump_tape", metavar="PATH",
                   help="write a line-per-node dump of one estimate tape")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evograd",
        description="population-estimated hypergradient experiments",
        exit_on_error=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment across seeds",
                           exit_on_error=False)
    _add_config_flags(p_run, need_experiment=True)

    p_sweep = sub.add_parser("sweep", help="cost sweeps over a scaling dimension",
                             exit_on_error=False)
    p_sweep.add_argument("--dimension", choices=cfgmod.SWEEP_DIMENSIONS)
    p_sweep.add_argument("--grid", help="comma-separated grid points, e.g. 1,2,3,4,5")
    _add_config_flags(p_sweep, need_experiment=False)

    p_sum = sub.add_parser("summarize", help="summarise a metrics CSV",
                           exit_on_error=False)
    p_sum.add_argument("csv", help="metrics CSV produced by run")
    p_sum.add_argument("--out", help="also write the JSON summary here")
    return parser


def _overrides_from_args(args, keys) -> dict:
    out = {}
    for key in keys:
        v = getattr(args, key, None)
        if v is None:
            continue
        if key == "seeds":
            v = tuple(int(x) for x in v.split(","))
        if key == "k":
            v = tuple(v)
        out[key] = v
    return out


_RUN_KEYS = ("experiment", "method", "seeds", "sigma", "tau", "k", "noise_kind",
             "lr", "meta_lr", "steps", "warmup_steps", "n_train", "reps",
             "true_angle", "rho", "probe_steps", "out", "dump_tape")


def _config_from_args(args, extra: dict | None = None) -> cfgmod.ExperimentConfig:
    file_values = cfgmod.parse_config_file(args.config) if args.config else {}
    overrides = _overrides_from_args(args, _RUN_KEYS)
    overrides.update(extra or {})
    return cfgmod.build_config(file_values, overrides)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except argparse.ArgumentError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    try:
        if args.command == "run":
            cfg = _config_from_args(args)
            result = runner.run_experiment(cfg)
        elif args.command == "sweep":
            extra = {"experiment": "scaling"}
            if args.dimension:
                extra["sweep_dimension"] = args.dimension
            if args.grid:
                extra["sweep_grid"] = tuple(int(x) for x in args.grid.split(","))
            cfg = _config_from_args(args, extra)
            result = runner.run_sweep(cfg)
        else:
            summary = metrics.summarize(args.csv)
            print(json.dumps(summary, indent=2, sort_keys=True))
            if args.out:
                metrics.write_json(args.out, summary)
            return 0
    except cfgmod.ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 1
    except (FileNotFoundError, metrics.MalformedCSV, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 2

    print(json.dumps(result.summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
