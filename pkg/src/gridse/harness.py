"""Experiment harness: repeated timed solves and the structured studies
(K-sweep, family masking, method comparison) with CSV/JSON table output.

Timings are reported for inspection only; correctness columns (objective,
iterations, boundary dimension) are the stable surface.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .measurement import (
    MeasurementConfig,
    MeasurementType,
    apply_mask,
    generate_measurements,
    load_measurements,
    type_from_label,
)
from .network import load_case, parse_case
from .partition import build_variable_maps, partition_network, read_partition_file
from .solver import SolverConfig, SolverError, solve_centralized, solve_multiarea

MASKABLE_FAMILIES = ("pf", "pt", "qf", "qt")


@dataclass
class ExperimentSpec:
    case_path: str
    case_format: str = None  # inferred from the suffix when None
    measurements_path: str = None  # generated from the case when absent
    sigma_vm: float = 0.01
    sigma_power: float = 0.02
    seed: int = 0  # measurement noise and partitioner seed
    partition_path: str = None
    k: int = None
    method: str = "multiarea"  # or "centralized"
    repeats: int = 11  # first run excluded from means when repeats >= 2
    inner_gn_steps: int = 1
    tol: float = 1e-6
    max_iters: int = 10
    deterministic: bool = True

    def solver_config(self):
        return SolverConfig(
            max_outer_iterations=self.max_iters,
            inner_gn_steps=self.inner_gn_steps,
            convergence_tol=self.tol,
            deterministic=self.deterministic,
        )


def load_inputs(spec: ExperimentSpec):
    """(network, measurement set, partition-or-None) for an experiment."""
    if spec.case_format:
        with open(spec.case_path) as fh:
            net = parse_case(fh.read(), spec.case_format)
    else:
        net = load_case(spec.case_path)
    if spec.measurements_path:
        ms = load_measurements(net, spec.measurements_path)
    else:
        ms = generate_measurements(
            net,
            MeasurementConfig(
                sigma_vm=spec.sigma_vm, sigma_power=spec.sigma_power, seed=spec.seed
            ),
        )
    part = None
    if spec.method == "multiarea":
        if spec.partition_path:
            part = read_partition_file(net, spec.partition_path)
        else:
            part = partition_network(net, spec.k or 1, seed=spec.seed)
    return net, ms, part


RUN_COLUMNS = (
    "run",
    "iterations",
    "converged",
    "objective",
    "weighted_residual_norm",
    "total_time_s",
    "assembly_s",
    "local_condense_s",
    "boundary_assemble_s",
    "boundary_solve_s",
    "recovery_s",
)


def _run_row(idx, report):
    t = report.timings
    return {
        "run": idx,
        "iterations": report.iterations,
        "converged": report.converged,
        "objective": report.objective,
        "weighted_residual_norm": report.weighted_residual_norm,
        "total_time_s": t["total"],
        "assembly_s": t["assembly"],
        "local_condense_s": t["local_condense"],
        "boundary_assemble_s": t["boundary_assemble"],
        "boundary_solve_s": t["boundary_solve"],
        "recovery_s": t["recovery"],
    }


def _mean_excluding_first(rows):
    pool = rows[1:] if len(rows) >= 2 else rows
    out = {}
    for key in RUN_COLUMNS:
        if key == "run":
            continue
        if key == "converged":
            out[key] = all(r[key] for r in pool)
        else:
            out[key] = float(np.mean([r[key] for r in pool]))
    return out


def _solve_once(net, ms, part, spec):
    cfg = spec.solver_config()
    if spec.method == "centralized":
        return solve_centralized(net, ms, cfg)
    return solve_multiarea(net, ms, part, config=cfg)


def run_experiment(spec: ExperimentSpec) -> dict:
    """Solve ``repeats`` times on identical inputs; per-run rows plus the
    mean excluding the warm-up run (when repeats >= 2)."""
    if spec.repeats < 1:
        raise ValueError("repeats must be >= 1")
    net, ms, part = load_inputs(spec)
    rows, n_gamma = [], 0
    for r in range(spec.repeats):
        _, report = _solve_once(net, ms, part, spec)
        n_gamma = report.n_gamma
        rows.append(_run_row(r + 1, report))
    return {
        "case": spec.case_path,
        "method": spec.method,
        "n_bus": net.n_bus,
        "n_branch": net.n_branch,
        "n_measurements": ms.m,
        "k": part.k if part is not None else 1,
        "n_gamma": n_gamma,
        "repeats": spec.repeats,
        "runs": rows,
        "mean_excluding_first": _mean_excluding_first(rows),
        "all_converged": all(r["converged"] for r in rows),
    }


SWEEP_COLUMNS = (
    "k",
    "feasible",
    "cut_branches",
    "boundary_dim",
    "iterations",
    "converged",
    "total_time_s",
    "coordinator_share",
    "error",
)


def sweep_k(spec: ExperimentSpec, ks) -> list:
    """One row per partition count: boundary dimension, mean total time, and
    coordinator share = (boundary assembly + boundary solve) / total."""
    net, ms, _ = load_inputs(
        ExperimentSpec(**{**spec.__dict__, "method": "centralized"})
    )
    rows = []
    for k in ks:
        row = {c: "" for c in SWEEP_COLUMNS}
        row["k"] = k
        try:
            part = partition_network(net, k, seed=spec.seed)
            bord, maps = build_variable_maps(net, part)
            runs = []
            for r in range(spec.repeats):
                _, report = solve_multiarea(
                    net, ms, part, maps=(bord, maps), config=spec.solver_config()
                )
                runs.append(_run_row(r + 1, report))
            mean = _mean_excluding_first(runs)
            coord = mean["boundary_assemble_s"] + mean["boundary_solve_s"]
            row.update(
                feasible=True,
                cut_branches=len(part.cut_branches),
                boundary_dim=bord.n_gamma,
                iterations=mean["iterations"],
                converged=mean["converged"],
                total_time_s=mean["total_time_s"],
                coordinator_share=coord / mean["total_time_s"],
                error="",
            )
        except Exception as exc:  # infeasible k becomes a warning row
            row.update(feasible=False, converged=False, error=str(exc))
        rows.append(row)
    return rows


MASK_COLUMNS = (
    "family",
    "removed_rows",
    "iterations",
    "converged",
    "mean_time_s",
    "objective",
    "error",
)


def mask_experiment(spec: ExperimentSpec, families=None) -> list:
    """One row per masked flow family plus the unmasked baseline."""
    net, ms, part = load_inputs(spec)
    if families is None:
        families = ("none",) + MASKABLE_FAMILIES
    rows = []
    for fam in families:
        label = str(fam).lower()
        row = {c: "" for c in MASK_COLUMNS}
        row["family"] = label
        if label == "none":
            masked, removed = ms, 0
        else:
            mtype = type_from_label(label)
            masked = apply_mask(ms, mtype)
            removed = int(np.sum(~masked.active & ms.active))
        row["removed_rows"] = removed
        try:
            runs = []
            for r in range(spec.repeats):
                _, report = _solve_once(net, masked, part, spec)
                runs.append(_run_row(r + 1, report))
            mean = _mean_excluding_first(runs)
            row.update(
                iterations=mean["iterations"],
                converged=mean["converged"],
                mean_time_s=mean["total_time_s"],
                objective=mean["objective"],
                error="",
            )
        except SolverError as exc:  # observability loss is a row, not a crash
            row.update(converged=False, error=str(exc))
        rows.append(row)
    return rows


def compare_methods(spec: ExperimentSpec) -> dict:
    """Run both solvers on identical inputs and diff the estimates."""
    net, ms, part = load_inputs(ExperimentSpec(**{**spec.__dict__, "method": "multiarea"}))
    cfg = spec.solver_config()
    est_c, rep_c = solve_centralized(net, ms, cfg)
    est_m, rep_m = solve_multiarea(net, ms, part, config=cfg)
    diff = max(
        float(np.max(np.abs(est_c.va - est_m.va))),
        float(np.max(np.abs(est_c.vm - est_m.vm))),
    )
    rel = abs(rep_c.objective - rep_m.objective) / max(abs(rep_c.objective), 1e-300)
    return {
        "case": spec.case_path,
        "k": part.k,
        "centralized": rep_c.to_dict(),
        "multiarea": rep_m.to_dict(),
        "max_state_diff": diff,
        "objective_rel_diff": rel,
        "objectives_agree_1e6": rel <= 1e-6,
        "all_converged": rep_c.converged and rep_m.converged,
    }


# ---------------------------------------------------------------------------
# table output
# ---------------------------------------------------------------------------

def write_rows(rows, columns, path, fmt):
    if fmt == "json":
        text = json.dumps({"rows": rows}, indent=1) + "\n"
    elif fmt == "csv":
        import io

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    if path is None:
        return text
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text


def write_run_report(doc, path, fmt):
    if fmt == "json":
        text = json.dumps(doc, indent=1) + "\n"
        if path:
            with open(path, "w") as fh:
                fh.write(text)
        return text
    rows = list(doc["runs"])
    summary = dict(doc["mean_excluding_first"])
    summary["run"] = "mean_excl_first"
    rows.append(summary)
    return write_rows(rows, RUN_COLUMNS, path, "csv")
