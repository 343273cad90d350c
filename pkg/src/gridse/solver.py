"""WLS Gauss-Newton solvers.

``solve_centralized`` iterates the full normal equations (explicit-Jacobian
assembly, one factorization per iteration with a cached symbolic analysis).

``solve_multiarea`` runs the hierarchical boundary-condensed loop: per outer
iteration each area assembles its blocks with the fused path, refactors its
interior block, and exports a condensed boundary contribution; the
coordinator scatters those into the reduced boundary system, solves it dense,
and the areas recover their interior updates.  With ``inner_gn_steps=1`` each
outer iteration reproduces the centralized Gauss-Newton step exactly (block
elimination), which the tests verify in lockstep.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .assembly import build_patterns, explicit_assemble, fused_accumulate
from .linalg import (
    NotPositiveDefiniteError,
    dense_cholesky_solve,
    interior_recover,
    numeric_refactor,
    schur_condense,
    symbolic_analyze,
)
from .measurement import MeasurementSet, StateVector, eval_h_all
from .partition import build_variable_maps, partition_network

PHASES = ("assembly", "local_condense", "boundary_assemble", "boundary_solve", "recovery")


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    max_outer_iterations: int = 10
    inner_gn_steps: int = 1
    convergence_tol: float = 1e-6  # on the infinity norm of the stacked update
    deterministic: bool = True  # serialize area work and reductions
    backend: str = "sparse"  # "dense" forces dense factors everywhere
    dense_threshold: int = 64  # sparse backend falls back to dense below this
    iterative_refinement: bool = False

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")
        if self.backend not in ("dense", "sparse"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def effective_dense_threshold(self):
        return 10**9 if self.backend == "dense" else self.dense_threshold


@dataclass
class SolveReport:
    method: str
    iterations: int
    converged: bool
    objective: float
    weighted_residual_norm: float
    n_gamma: int
    timings: dict

    def to_dict(self):
        return {
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
            "objective": self.objective,
            "weighted_residual_norm": self.weighted_residual_norm,
            "n_gamma": self.n_gamma,
            "timings": dict(self.timings),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


@dataclass
class BoundarySystem:
    """Reduced coordinator system S_gamma dx_gamma = b_gamma."""

    s_gamma: np.ndarray
    b_gamma: np.ndarray
    delta_x_gamma: np.ndarray = None


def objective(ms: MeasurementSet, state: StateVector) -> float:
    """WLS objective: sum of active w_i (z_i - h_i(x))^2 (masked rows weigh 0)."""
    r = ms.z - eval_h_all(ms, state)
    return float(np.sum(ms.weight * r * r))


def assemble_boundary(schur_results, selectors, n_gamma) -> BoundarySystem:
    """Scatter per-area condensed blocks into the global boundary system.

    Contributions are added in area order, so deterministic runs reduce in a
    fixed sequence.
    """
    s_gamma = np.zeros((n_gamma, n_gamma))
    b_gamma = np.zeros(n_gamma)
    for res, sel in zip(schur_results, selectors):
        if len(sel) == 0:
            continue
        s_gamma[np.ix_(sel, sel)] += res.s_b
        b_gamma[sel] += res.b_hat
    return BoundarySystem(s_gamma=s_gamma, b_gamma=b_gamma)


def _finish_timings(timings, t_start):
    timings["total"] = time.perf_counter() - t_start
    for p in PHASES:
        timings.setdefault(p, 0.0)
    return timings


def _make_report(method, ms, state, iterations, converged, n_gamma, timings, t_start):
    j = objective(ms, state)
    return SolveReport(
        method=method,
        iterations=iterations,
        converged=converged,
        objective=j,
        weighted_residual_norm=float(np.sqrt(j)),
        n_gamma=n_gamma,
        timings=_finish_timings(timings, t_start),
    )


# ---------------------------------------------------------------------------
# Centralized baseline
# ---------------------------------------------------------------------------

def solve_centralized(net, ms: MeasurementSet, config: SolverConfig = None, on_iteration=None):
    """Full WLS-GN from a flat start; returns (estimate, report)."""
    cfg = config or SolverConfig()
    t_start = time.perf_counter()
    timings = {p: 0.0 for p in PHASES}

    part = partition_network(net, 1, seed=0)
    _, maps = build_variable_maps(net, part)
    vmap = maps[0]
    pattern = build_patterns(vmap, ms)
    try:
        cache = symbolic_analyze(
            pattern.gii_pattern(),
            dense_threshold=cfg.effective_dense_threshold,
            context="gain matrix",
        )
    except NotPositiveDefiniteError as exc:  # pragma: no cover - analysis never pivots
        raise SolverError(str(exc)) from exc

    state = StateVector.flat_start(net)
    empty = np.zeros(0)
    converged = False
    iterations = 0
    for it in range(1, cfg.max_outer_iterations + 1):
        t0 = time.perf_counter()
        x_i = vmap.gather_interior(state.va, state.vm)
        _, blocks = explicit_assemble(vmap, ms, x_i, empty, pattern=pattern)
        t1 = time.perf_counter()
        try:
            numeric_refactor(cache, blocks.g_ii)
        except NotPositiveDefiniteError as exc:
            raise SolverError(
                f"gain matrix {exc}: system unobservable or ill-conditioned"
            ) from exc
        t2 = time.perf_counter()
        delta = cache.solve(
            blocks.b_i, refine_with=blocks.g_ii if cfg.iterative_refinement else None
        )
        vmap.apply_interior_delta(state.va, state.vm, delta)
        t3 = time.perf_counter()
        timings["assembly"] += t1 - t0
        timings["local_condense"] += t2 - t1
        timings["recovery"] += t3 - t2
        iterations = it
        delta_inf = float(np.max(np.abs(delta))) if delta.size else 0.0
        if on_iteration is not None:
            on_iteration(it, state.copy(), delta_inf)
        if delta_inf < cfg.convergence_tol:
            converged = True
            break
    report = _make_report("centralized", ms, state, iterations, converged, 0, timings, t_start)
    return state, report


# ---------------------------------------------------------------------------
# Hierarchical multi-area solver
# ---------------------------------------------------------------------------

def solve_multiarea(net, ms: MeasurementSet, part, maps=None, config: SolverConfig = None,
                    on_iteration=None):
    """Boundary-condensed multi-area WLS-GN; returns (estimate, report).

    Per outer iteration: broadcast the boundary state, run the per-area
    inner steps (assemble, refactor, condense), aggregate the reduced
    boundary system, solve it dense, scatter the boundary update back and
    recover interiors.  Stops on the stacked update's infinity norm.
    """
    cfg = config or SolverConfig()
    t_start = time.perf_counter()
    timings = {p: 0.0 for p in PHASES}

    if maps is None:
        bord, maps = build_variable_maps(net, part)
    else:
        bord, maps = maps
    patterns = [build_patterns(m, ms) for m in maps]
    caches = [
        symbolic_analyze(
            p.gii_pattern(),
            dense_threshold=cfg.effective_dense_threshold,
            context=f"area {m.area} interior block",
        )
        for p, m in zip(patterns, maps)
    ]
    n_gamma = bord.n_gamma

    state = StateVector.flat_start(net)
    converged = False
    iterations = 0

    def area_local(k):
        """Inner GN steps for one area: assemble, refactor, condense."""
        vmap = maps[k]
        t_asm = t_cond = 0.0
        inner_delta = 0.0
        blocks = None
        x_gamma_local = bord.gather(state.va, state.vm)[vmap.boundary_selector]
        for step in range(cfg.inner_gn_steps):
            t0 = time.perf_counter()
            x_i = vmap.gather_interior(state.va, state.vm)
            blocks = fused_accumulate(vmap, ms, x_i, x_gamma_local, pattern=patterns[k])
            t1 = time.perf_counter()
            try:
                numeric_refactor(caches[k], blocks.g_ii.data)
            except NotPositiveDefiniteError as exc:
                raise SolverError(f"{exc}; area {k} is likely locally unobservable") from exc
            t2 = time.perf_counter()
            t_asm += t1 - t0
            t_cond += t2 - t1
            if step < cfg.inner_gn_steps - 1:
                # local WLS step with the boundary held fixed
                dxi = caches[k].solve(blocks.b_i)
                vmap.apply_interior_delta(state.va, state.vm, dxi)
                if dxi.size:
                    inner_delta = max(inner_delta, float(np.max(np.abs(dxi))))
        t2 = time.perf_counter()
        schur = schur_condense(caches[k], blocks.g_ib, blocks.g_bb, blocks.b_i, blocks.b_b)
        t_cond += time.perf_counter() - t2
        return blocks, schur, inner_delta, t_asm, t_cond

    def area_recover(k, blocks, delta_gamma):
        vmap = maps[k]
        dxb = delta_gamma[vmap.boundary_selector]
        dxi = interior_recover(caches[k], blocks.g_ib, blocks.b_i, dxb)
        vmap.apply_interior_delta(state.va, state.vm, dxi)
        return float(np.max(np.abs(dxi))) if dxi.size else 0.0

    pool = None if cfg.deterministic or part.k == 1 else ThreadPoolExecutor(part.k)
    try:
        for it in range(1, cfg.max_outer_iterations + 1):
            t_iter0 = time.perf_counter()
            if pool is None:
                results = [area_local(k) for k in range(part.k)]
            else:
                results = list(pool.map(area_local, range(part.k)))
            wall_local = time.perf_counter() - t_iter0
            asm_sum = sum(r[3] for r in results)
            cond_sum = sum(r[4] for r in results)
            if pool is None:
                timings["assembly"] += asm_sum
                timings["local_condense"] += cond_sum
            else:
                # proportional attribution keeps phase sums below the wall time
                tot = asm_sum + cond_sum
                share = asm_sum / tot if tot > 0 else 0.5
                timings["assembly"] += wall_local * share
                timings["local_condense"] += wall_local * (1.0 - share)

            if n_gamma:
                t0 = time.perf_counter()
                bs = assemble_boundary(
                    [r[1] for r in results], [m.boundary_selector for m in maps], n_gamma
                )
                t1 = time.perf_counter()
                try:
                    delta_gamma = dense_cholesky_solve(
                        bs.s_gamma, bs.b_gamma, context="boundary system"
                    )
                except NotPositiveDefiniteError as exc:
                    bus, quant = bord.entries[exc.pivot]
                    raise SolverError(
                        f"boundary system not positive definite at pivot {exc.pivot} "
                        f"(bus {net.buses[bus].id}, {quant})"
                    ) from exc
                bs.delta_x_gamma = delta_gamma
                t2 = time.perf_counter()
                timings["boundary_assemble"] += t1 - t0
                timings["boundary_solve"] += t2 - t1
            else:
                delta_gamma = np.zeros(0)  # no coordination work exists at k=1

            t3 = time.perf_counter()
            if pool is None:
                deltas = [area_recover(k, results[k][0], delta_gamma) for k in range(part.k)]
            else:
                deltas = list(
                    pool.map(lambda k: area_recover(k, results[k][0], delta_gamma),
                             range(part.k))
                )
            bord.apply_delta(state.va, state.vm, delta_gamma)
            timings["recovery"] += time.perf_counter() - t3

            iterations = it
            delta_inf = max(
                [r[2] for r in results]
                + deltas
                + ([float(np.max(np.abs(delta_gamma)))] if delta_gamma.size else [0.0])
            )
            if on_iteration is not None:
                on_iteration(it, state.copy(), delta_inf)
            if delta_inf < cfg.convergence_tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    report = _make_report(
        "multiarea", ms, state, iterations, converged, n_gamma, timings, t_start
    )
    return state, report
