"""Command-line harness.

Subcommands: run, sweep-k, mask, gen-measurements, partition, compare.
Exit code is 0 only when every requested run converged.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    MASK_COLUMNS,
    SWEEP_COLUMNS,
    ExperimentSpec,
    compare_methods,
    mask_experiment,
    run_experiment,
    sweep_k,
    write_rows,
    write_run_report,
)
from .measurement import MeasurementConfig, generate_measurements, write_measurements
from .network import load_case
from .partition import build_variable_maps, partition_network, write_partition_file
from .solver import SolverError


def _add_common(p, method_default="multiarea"):
    p.add_argument("--case", required=True, help="case file (.m MATPOWER subset or .json)")
    p.add_argument("--format", choices=["matpower-m", "native-json"], default=None,
                   help="case format override (default: inferred from suffix)")
    p.add_argument("--measurements", default=None, help="measurement file (.json/.csv)")
    p.add_argument("--partition", default=None, help="partition file (JSON)")
    p.add_argument("--k", default=None, help="area count (sweep-k: comma list)")
    p.add_argument("--seed", type=int, default=0, help="noise and partitioner seed")
    p.add_argument("--repeats", type=int, default=11,
                   help="solve repetitions; the first is excluded from means")
    p.add_argument("--method", choices=["centralized", "multiarea"], default=method_default)
    p.add_argument("--inner-steps", type=int, default=1, dest="inner_steps")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=10, dest="max_iters")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--output-format", choices=["json", "csv"], default="json",
                   dest="output_format")
    p.add_argument("--sigma-vm", type=float, default=0.01, dest="sigma_vm")
    p.add_argument("--sigma-power", type=float, default=0.02, dest="sigma_power")


def _spec(args, method=None):
    return ExperimentSpec(
        case_path=args.case,
        case_format=args.format,
        measurements_path=args.measurements,
        sigma_vm=args.sigma_vm,
        sigma_power=args.sigma_power,
        seed=args.seed,
        partition_path=args.partition,
        k=int(args.k) if args.k not in (None, "") else None,
        method=method or args.method,
        repeats=args.repeats,
        inner_gn_steps=args.inner_steps,
        tol=args.tol,
        max_iters=args.max_iters,
        deterministic=args.deterministic,
    )


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)


def cmd_run(args):
    spec = _spec(args)
    if spec.method == "multiarea" and not (spec.partition_path or spec.k):
        spec.k = 1
    doc = run_experiment(spec)
    _emit(write_run_report(doc, args.out, args.output_format), args.out)
    return 0 if doc["all_converged"] else 1


def cmd_sweep_k(args):
    ks = [int(v) for v in str(args.k or "2,3,4,6").split(",")]
    args.k = None
    spec = _spec(args, method="multiarea")
    rows = sweep_k(spec, ks)
    _emit(write_rows(rows, SWEEP_COLUMNS, args.out, args.output_format), args.out)
    ok = all(r["feasible"] and r["converged"] for r in rows)
    return 0 if ok else 1


def cmd_mask(args):
    spec = _spec(args)
    if spec.method == "multiarea" and not (spec.partition_path or spec.k):
        spec.k = 1
    families = None
    if args.families:
        families = [f.strip() for f in args.families.split(",")]
    rows = mask_experiment(spec, families)
    _emit(write_rows(rows, MASK_COLUMNS, args.out, args.output_format), args.out)
    return 0 if all(r["converged"] is True for r in rows) else 1


def cmd_gen_measurements(args):
    net = load_case(args.case)
    ms = generate_measurements(
        net,
        MeasurementConfig(sigma_vm=args.sigma_vm, sigma_power=args.sigma_power, seed=args.seed),
    )
    if args.out is None:
        raise SystemExit("gen-measurements requires --out")
    write_measurements(ms, args.out)
    print(f"wrote {ms.m} rows to {args.out}")
    return 0


def cmd_partition(args):
    net = load_case(args.case)
    part = partition_network(net, int(args.k or 2), seed=args.seed)
    bord, _ = build_variable_maps(net, part)
    if args.out:
        write_partition_file(part, args.out)
    summary = {
        "k": part.k,
        "cut_branches": len(part.cut_branches),
        "boundary_buses": len(part.boundary_buses),
        "boundary_dim": bord.n_gamma,
    }
    print(json.dumps(summary))
    return 0


def cmd_compare(args):
    spec = _spec(args)
    if not (spec.partition_path or spec.k):
        spec.k = 2
    doc = compare_methods(spec)
    text = json.dumps(doc, indent=1) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0 if doc["all_converged"] else 1


def build_parser():
    ap = argparse.ArgumentParser(
        prog="gridse",
        description="Multi-area WLS state estimation: solvers and experiment tables.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="repeated timed solve of one method")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep-k", help="partition-count sweep (multi-area)")
    _add_common(p)
    p.set_defaults(fn=cmd_sweep_k)

    p = sub.add_parser("mask", help="flow-family masking study")
    _add_common(p)
    p.add_argument("--families", default=None,
                   help="comma list from {none,pf,pt,qf,qt}; default all")
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("gen-measurements", help="write a synthetic measurement file")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_measurements)

    p = sub.add_parser("partition", help="partition a case and write the assignment")
    _add_common(p)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("compare", help="run both methods and diff the estimates")
    _add_common(p)
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
