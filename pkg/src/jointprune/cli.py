"""Command-line entry point.

Exit codes: 0 success, 1 bad input (config, checkpoint, CSV), 2 runtime
failure during optimization (the trace written so far is kept).  Set
``JOINTPRUNE_LOG`` to a logging level name (``INFO``, ``DEBUG``) for progress.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import config as run_config
from . import cost as costs
from .experiment import build, optimize
from .net import SharedWeightStore, evaluate_config
from .optimizer import read_trace
from .space import ArchitectureConfig, check_config, clamp, round_to_config

log = logging.getLogger("jointprune")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_optimize(args) -> int:
    try:
        cfg = run_config.load(args.config)
        setup = build(cfg)
    except (OSError, ValueError) as exc:
        return _fail(1, str(exc))
    try:
        _, result = optimize(cfg, resume=args.resume, setup=setup)
    except Exception as exc:  # noqa: BLE001 - any failure mid-run maps to exit 2
        log.exception("optimization failed")
        return _fail(2, f"optimization failed: {exc}")
    final = result.config
    print(json.dumps({**final.as_dict(), "cost": setup.cost_of(final), "metric": setup.constraint.metric}))
    return 0


def _read_arg(value: str) -> str:
    if os.path.exists(value):
        with open(value, encoding="utf-8") as fh:
            return fh.read()
    return value


def cmd_evaluate(args) -> int:
    state_path = os.path.join(args.checkpoint, "state.json")
    try:
        with open(state_path, encoding="utf-8") as fh:
            state = json.load(fh)
        cfg = run_config.loads(state["run_config"])
        setup = build(cfg)
        c = state["constraint"]
        constraint = costs.ConstraintSpec(c["metric"], c["target"], c["rho"], c["unit"], c["form"])
        if args.rho is not None:
            constraint = costs.ConstraintSpec(c["metric"], c["target"], args.rho, c["unit"], c["form"])
        store = SharedWeightStore.load(os.path.join(args.checkpoint, "store.bin"), setup.space)
        space = setup.space
        if args.vector is not None:
            text = _read_arg(args.vector)
            vector = np.array([float(t) for t in text.replace(",", " ").split()])
            if vector.size != space.dim:
                raise ValueError(f"vector has {vector.size} entries, checkpoint space needs {space.dim}")
            config = round_to_config(clamp(vector, space), space)
        else:
            config = ArchitectureConfig.from_dict(json.loads(_read_arg(args.config)))
            check_config(config, space)
    except (OSError, KeyError, ValueError) as exc:
        return _fail(1, str(exc))
    loss, acc = evaluate_config(store, config, setup.val)
    cost = costs.cost(config, space, constraint.metric, setup.table)
    report = {
        "architecture": config.as_dict(),
        "loss": loss,
        "accuracy": acc,
        "cost": cost,
        "metric": constraint.metric,
        "penalized_error": costs.penalized_error(loss, cost, constraint),
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


REPORT_FILES = ("pruning_ratio.csv", "architecture.csv", "cost.csv", "k_bound.csv")


def cmd_report(args) -> int:
    try:
        records, clean = read_trace(args.trace)
    except (OSError, ValueError) as exc:
        return _fail(1, str(exc))
    if not clean:
        print(f"warning: trace {args.trace} is truncated; reporting {len(records)} complete records",
              file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    dim = len(records[0].mu) if records else 0
    names = [f"c{i + 1}" for i in range(dim - 2)] + ["spatial", "depth"] if dim else []

    def writer(name):
        fh = open(os.path.join(args.out, name), "w", newline="", encoding="utf-8")
        return fh, csv.writer(fh, lineterminator="\n")

    fh, w = writer("pruning_ratio.csv")
    with fh:
        w.writerow(["iteration"] + names)
        for r in records:
            w.writerow([r.outer_step] + [repr(x) for x in r.mu])
    fh, w = writer("architecture.csv")
    with fh:
        w.writerow(["entry", "mu", "value"])
        if records and records[-1].config:
            last = records[-1]
            values = last.config["out_channels"] + [last.config["spatial"], last.config["depth"]]
            for name, m, v in zip(names, last.mu, values):
                w.writerow([name, repr(m), v])
    fh, w = writer("cost.csv")
    with fh:
        w.writerow(["iteration", "cost", "loss", "error", "sigma", "alpha", "sample_cost_std"])
        for r in records:
            spread = float(np.mean([u["cost_std"] for u in r.updates])) if r.updates else 0.0
            w.writerow([r.outer_step, repr(r.config_cost), repr(r.loss), repr(r.error), repr(r.sigma),
                        repr(r.alpha), repr(spread)])
    fh, w = writer("k_bound.csv")
    with fh:
        w.writerow(["iteration", "k_bound", "gradient_norm"])
        for r in records:
            w.writerow([r.outer_step, repr(r.k_bound), repr(r.gradient_norm)])
    print(f"wrote {len(REPORT_FILES)} files for {len(records)} records to {args.out}")
    return 0


def cmd_lut(args) -> int:
    try:
        table = costs.read_lut(args.inp)
    except costs.LutFormatError as exc:
        return _fail(1, f"{args.inp}: {exc}")
    except OSError as exc:
        return _fail(1, str(exc))
    if args.action == "validate":
        gaps = table.gaps()
        for g in gaps[:20]:
            print(f"gap: layer {g[0]} key {g[1:]}")
        print(f"{len(table)} rows, {len(gaps)} gaps")
        return 0
    try:
        filled = costs.fill_missing(table)
    except ValueError as exc:
        return _fail(1, str(exc))
    out = args.out or args.inp
    costs.write_lut(filled, out)
    print(f"filled {len(filled) - len(table)} gaps, wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointprune", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run the pruning-vector optimization")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="score one architecture against a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory of a run")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--vector", help="pruning vector: comma-separated values or a file")
    g.add_argument("--config", help="architecture JSON string or file")
    p.add_argument("--rho", type=float, default=None, help="override the penalty weight")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="write plot-ready CSVs from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("lut", help="validate or fill a latency lookup table")
    p.add_argument("action", choices=("validate", "fill"))
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lut)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("JOINTPRUNE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
