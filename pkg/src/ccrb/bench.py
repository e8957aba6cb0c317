"""Benchmark harness: run a solver set on one instance and tabulate convergence.

Each row reports the predicted root convergence factor, the first
iterations at which the bound estimate is within 5% and 0.5% of the
reference, the iteration count to the stopping rule, total flops and
whether the run finished before the direct solve would have been cheaper.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constrained import (ConstrainedQmpProblem, constrained_crb_oracle,
                          gs_two_solve_composition, solve_constrained_mm,
                          solve_constrained_pcg, solve_gradient_projection)
from .errors import CRBError
from .fss import breakeven_iterations, direct_cost
from .matrix import direct_solve
from .precond import complete_data, diagonally_dominant, jacobi_majorizer
from .solvers import (QmpProblem, SolveReport, iterations_to_within, solve_gd, solve_mm,
                      stopping_rule)

UNCONSTRAINED_SOLVERS = ("mm", "richardson", "gauss_seidel", "steepest", "cg", "pcg")
CONSTRAINED_SOLVERS = ("cpcg", "cmm-cf", "cmm-dd", "cmm-jacobi", "gp", "gs")
TABLE_COLUMNS = ("solver", "rho", "iters_5pct", "iters_0p5pct", "iters_converge", "flops",
                 "within_breakeven")


@dataclass
class BenchInstance:
    """A problem plus the optional flow-size vector that defines ``cmm-cf``."""

    problem: object
    theta: Optional[np.ndarray] = None
    name: str = "instance"

    @property
    def constrained(self) -> bool:
        return isinstance(self.problem, ConstrainedQmpProblem)

    def default_solvers(self) -> tuple:
        if not self.constrained:
            return UNCONSTRAINED_SOLVERS
        if self.theta is None:
            return tuple(s for s in CONSTRAINED_SOLVERS if s != "cmm-cf")
        return ("cpcg", "cmm-cf", "cmm-dd", "gp", "gs")


@dataclass
class BenchRow:
    solver: str
    rho: float
    iters_5pct: Optional[int]
    iters_0p5pct: Optional[int]
    iters_converge: Optional[int]
    flops: int
    within_breakeven: bool
    status: str
    breakeven: Optional[int] = None

    def cells(self) -> list:
        def num(v):
            if v is None:
                return "not_reached"
            return repr(float(v)) if isinstance(v, float) else str(v)

        rho = "nan" if self.rho is None or math.isnan(self.rho) else repr(float(self.rho))
        conv = self.iters_converge if self.iters_converge is not None else self.status
        return [self.solver, rho, num(self.iters_5pct), num(self.iters_0p5pct), str(conv),
                str(self.flops), "true" if self.within_breakeven else "false"]


@dataclass
class BenchResult:
    instance: str
    n: int
    reference: float
    direct_flops: float
    rows: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)

    def row(self, solver: str) -> BenchRow:
        for r in self.rows:
            if r.solver == solver:
                return r
        raise KeyError(solver)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()


def reference_bound(instance: BenchInstance) -> float:
    """``tr(B^T X*)`` from the direct oracle."""
    prob = instance.problem
    if instance.constrained:
        X = constrained_crb_oracle(prob)
    else:
        X = direct_solve(prob.J, prob.B)
    return float(np.vdot(prob.B, X))


def _run_one(instance: BenchInstance, solver: str, stop, rate_iters: int, seed: int) -> SolveReport:
    prob = instance.problem
    if not instance.constrained:
        if solver == "mm":
            return solve_mm(prob, jacobi_majorizer(prob.J, seed=seed), stop=stop,
                            rate_iters=rate_iters, seed=seed)
        if solver not in UNCONSTRAINED_SOLVERS:
            raise ValueError(f"unknown unconstrained solver {solver!r}")
        return solve_gd(prob, solver, stop=stop, rate_iters=rate_iters, seed=seed,
                        raise_on_divergence=False)
    if solver in ("cpcg", "cmm-cf", "gp") and instance.theta is not None:
        P = complete_data(instance.theta)
    else:
        P = None
    if solver == "cpcg":
        return solve_constrained_pcg(prob, P if P is not None else np.diag(prob.J.data).copy(),
                                     stop=stop, rate_iters=rate_iters, seed=seed)
    if solver == "cmm-cf":
        if P is None:
            raise ValueError("cmm-cf needs the flow-size distribution")
        return solve_constrained_mm(prob, P, stop=stop, rate_iters=rate_iters, seed=seed)
    if solver == "cmm-dd":
        return solve_constrained_mm(prob, diagonally_dominant(prob.J), stop=stop,
                                    rate_iters=rate_iters, seed=seed)
    if solver == "cmm-jacobi":
        return solve_constrained_mm(prob, jacobi_majorizer(prob.J, seed=seed), stop=stop,
                                    rate_iters=rate_iters, seed=seed)
    if solver == "gp":
        return solve_gradient_projection(prob, P, stop=stop)
    if solver == "gs":
        return gs_two_solve_composition(prob.J, prob.B, prob.H, stop=stop)
    raise ValueError(f"unknown constrained solver {solver!r}")


def run_bench(instance: BenchInstance, solvers=None, eps: float = 1e-6,
              max_iters: int = 200_000, rate_iters: int = 1000, seed: int = 0) -> BenchResult:
    """Run `solvers` on `instance` with a ``bound_delta(eps)`` stop against the oracle.

    Failures are recorded as rows with an ``error:<Type>`` status; the
    table is never aborted.
    """
    prob = instance.problem
    ref = reference_bound(instance)
    stop = stopping_rule("bound_delta", eps, max_iters, reference=ref)
    n = prob.n
    res = BenchResult(instance.name, n, ref, direct_cost(n))
    for name in (solvers or instance.default_solvers()):
        try:
            rep = _run_one(instance, name, stop, rate_iters, seed)
        except CRBError as exc:
            res.rows.append(BenchRow(name, math.nan, None, None, None, 0, False,
                                     f"error:{type(exc).__name__}"))
            continue
        res.reports[name] = rep
        i5, i05 = iterations_to_within(rep, ref, (0.05, 0.005))
        per = rep.flops / rep.iterations if rep.iterations else 0
        be = breakeven_iterations(n, per) if per > 0 else None
        within = bool(rep.converged and (be is None or rep.iterations <= be))
        res.rows.append(BenchRow(name, rep.rho_predicted, i5, i05,
                                 rep.iterations if rep.converged else None, int(rep.flops),
                                 within, rep.status, be))
    return res


def unconstrained_instance(J, B, name: str = "matrix") -> BenchInstance:
    return BenchInstance(QmpProblem(J, B), None, name)


def constrained_instance(J, B, H, theta=None, name: str = "matrix") -> BenchInstance:
    """`H` may be a matrix, a ConstraintSet or ``"sum-to-zero"``."""
    return BenchInstance(ConstrainedQmpProblem(J, B, H),
                         None if theta is None else np.asarray(theta, dtype=float), name)
