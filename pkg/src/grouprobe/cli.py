"""Command-line entry point.

Exit codes: 0 success, 1 bound violations or failed subsets, 2 invalid
config or arguments, 3 data errors, 4 training did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data_io import DataFormatError
from .groups import build_groups, write_groups_jsonl
from .model import ConvergenceError
from .runner import (ConfigError, group_plan, load_config, prepare, report, run_counterexample,
                     run_experiment, run_sweep)

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3, 4


def _config(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["groups"]["seed"] = args.seed
        cfg["eval"]["test_point_selection"]["seed"] = args.seed
    if args.jobs is not None:
        cfg["actual"]["parallelism"] = args.jobs
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    _, model, _, _ = prepare(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    return EXIT_OK


def cmd_groups(args) -> int:
    cfg = _config(args)
    ds, model, rand, high = prepare(cfg)
    groups = build_groups(ds, group_plan(cfg, rand + high), model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_groups_jsonl(groups, out / "groups.jsonl")
    return EXIT_OK


def cmd_effects(args) -> int:
    summary = run_experiment(_config(args), args.out)
    bad = summary["failed_subsets"] or any(e["bound_violations"] for e in summary["eval"])
    return EXIT_VIOLATION if bad else EXIT_OK


def cmd_sweep(args) -> int:
    summary = run_sweep(_config(args), args.out)
    return EXIT_VIOLATION if any(r["failed_subsets"] for r in summary["rows"]) else EXIT_OK


def cmd_counterexample(args) -> int:
    res = run_counterexample(args.kind, 0 if args.seed is None else args.seed, args.out)
    return EXIT_OK if all(res["checks"].values()) else EXIT_VIOLATION


def cmd_report(args) -> int:
    json.dump(report(args.out), sys.stdout, sort_keys=True, indent=1)
    sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grouprobe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override group and test-point seeds")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes for retraining")
        sp.add_argument("--out", required=True, help="output directory")

    for name, fn, help_ in (("train", cmd_train, "train the model and write model.json"),
                            ("groups", cmd_groups, "build groups and write groups.jsonl"),
                            ("effects", cmd_effects, "full comparison run"),
                            ("sweep", cmd_sweep, "correlation against lambda")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("counterexample", help="generate a counterexample construction")
    sp.add_argument("kind", choices=["mog", "ortho"])
    common(sp, config=False)
    sp.set_defaults(func=cmd_counterexample)
    sp = sub.add_parser("report", help="recompute statistics from an output directory")
    sp.add_argument("--out", required=True, help="directory holding effects.csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GROUPROBE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as e:
        print(f"convergence error: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
