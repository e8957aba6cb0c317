"""Iterative solvers for the quadratic matrix program

    minimize  F(X) = 1/2 tr(X^T J X) - tr(B^T X)

whose minimizer ``J^{-1} B`` holds the requested block of the Cramer-Rao
bound. With ``B = e_k`` the estimate ``b^T x`` converges to ``[J^{-1}]_kk``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (DimensionMismatch, Divergence, InternalError,
                     MonotonicityViolation, NotPositiveDefinite)
from .matrix import SymMatrix, as_sym, iteration_matrix_radius, power_extremes
from .precond import Preconditioner, as_preconditioner

NOT_REACHED = None
DIVERGENCE_WINDOW = 10
MM_REL_SLACK = 1e-8
# increases smaller than this (relative) are roundoff, not divergence
NOISE_REL = 1e-12
DEFAULT_MAX_ITERS = 100_000
# recursive residuals are replaced by B - J X this often
RESIDUAL_REFRESH = 25


@dataclass(frozen=True, eq=False)
class QmpProblem:
    """Fisher matrix ``J`` and selector ``B`` (n x m)."""

    J: SymMatrix
    B: np.ndarray

    def __post_init__(self):
        J = as_sym(self.J)
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.ndim != 2 or B.shape[0] != J.n or B.shape[1] < 1:
            raise DimensionMismatch(f"B of shape {B.shape} does not match n={J.n}")
        B = B.copy()
        B.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.J.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def require_positive_definite(self, rel_tol: float = 1e-12) -> None:
        """Raise NotPositiveDefinite unless ``lambda_min(J) > rel_tol * |lambda|_max``."""
        w = np.linalg.eigvalsh(self.J.data)
        if not w[0] > rel_tol * max(abs(w[0]), abs(w[-1])):
            raise NotPositiveDefinite(f"J is not positive definite (lambda_min = {w[0]:.3e})")


def selector(n: int, k) -> np.ndarray:
    """Columns of the identity picking the 0-based indices `k` (int or range)."""
    idx = [k] if np.isscalar(k) else list(k)
    return np.eye(n)[:, idx]


@dataclass(frozen=True)
class StoppingRule:
    """Stopping test consulted once per iteration.

    criteria
        Tuple of ``(kind, eps)`` pairs; the rule fires when any holds.
        ``objective_delta``: ``|F_k - F_{k-1}| < eps``.
        ``residual_norm``: ``||B - J X_k||_F <= eps ||B||_F``.
        ``bound_delta``: ``|tr(B^T X_k) - reference| <= eps``.
    """

    criteria: tuple = (("residual_norm", 1e-10),)
    max_iters: int = DEFAULT_MAX_ITERS
    reference: Optional[float] = None

    def __or__(self, other: "StoppingRule") -> "StoppingRule":
        ref = self.reference if self.reference is not None else other.reference
        return StoppingRule(self.criteria + other.criteria,
                            min(self.max_iters, other.max_iters), ref)

    def satisfied(self, k: int, objective: Sequence[float], bound: float,
                  resnorm: float, bnorm: float) -> bool:
        for kind, eps in self.criteria:
            if kind == "objective_delta":
                if k >= 1 and abs(objective[-1] - objective[-2]) < eps:
                    return True
            elif kind == "residual_norm":
                if resnorm <= eps * (bnorm if bnorm > 0 else 1.0):
                    return True
            elif kind == "bound_delta":
                if abs(bound - self.reference) <= eps:
                    return True
        return False


def stopping_rule(kind: str = "residual_norm", eps: float = 1e-10,
                  max_iters: int = DEFAULT_MAX_ITERS,
                  reference: Optional[float] = None) -> StoppingRule:
    if kind not in ("objective_delta", "residual_norm", "bound_delta"):
        raise ValueError(f"unknown stopping rule {kind!r}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if max_iters < 0:
        raise ValueError("max_iters must be nonnegative")
    if kind == "bound_delta" and reference is None:
        raise ValueError("bound_delta needs a reference value")
    return StoppingRule(((kind, float(eps)),), int(max_iters), reference)


@dataclass
class SolveReport:
    X_final: np.ndarray
    iterations: int
    objective_trajectory: list
    bound_trajectory: list
    residual_trajectory: list
    flops: int
    converged: bool
    rho_predicted: float = math.nan
    status: str = "converged"
    solver: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        """Final iterate as a vector when ``m == 1``."""
        return self.X_final[:, 0] if self.X_final.shape[1] == 1 else self.X_final

    @property
    def bound(self) -> float:
        return self.bound_trajectory[-1]

    def summary(self) -> dict:
        return {
            "solver": self.solver,
            "status": self.status,
            "converged": self.converged,
            "iterations": self.iterations,
            "flops": self.flops,
            "final_bound": self.bound,
            "final_objective": self.objective_trajectory[-1],
            "final_residual": self.residual_trajectory[-1],
            "rho_predicted": None if math.isnan(self.rho_predicted) else self.rho_predicted,
        }


class _Tracker:
    """Records trajectories and applies the stopping and sanity checks.

    mode
        ``"monotone"`` raises MonotonicityViolation on any objective increase
        beyond ``MM_REL_SLACK``; ``"window"`` flags divergence after
        ``DIVERGENCE_WINDOW`` consecutive increases.
    """

    def __init__(self, B: np.ndarray, stop: StoppingRule, name: str, mode: str = "window",
                 objective: Optional[Callable] = None, raise_on_divergence: bool = True,
                 bound_map: Optional[Callable] = None, residual_fn: Optional[Callable] = None):
        self.B = B
        self.residual_fn = residual_fn
        self.bnorm = float(np.linalg.norm(B if residual_fn is None else residual_fn(B)))
        self._b = np.ascontiguousarray(B).ravel()
        # fast path for the common single residual criterion
        self._residual_only = len(stop.criteria) == 1 and stop.criteria[0][0] == "residual_norm"
        self._rtol = stop.criteria[0][1] * (self.bnorm if self.bnorm > 0 else 1.0)
        self.stop = stop
        self.name = name
        self.mode = mode
        self.objective_fn = objective
        self.raise_on_divergence = raise_on_divergence
        self.bound_map = bound_map
        self.obj: list = []
        self.bound: list = []
        self.res: list = []
        self.k = -1
        self.flops = 0
        self.increases = 0
        self.status = "max_iters"
        self.converged = False

    def record(self, X: np.ndarray, R: np.ndarray) -> bool:
        """Record iterate ``X`` with residual ``R = B - J X``; True when finished."""
        self.k += 1
        x = X.ravel()
        if self.bound_map is None:
            b = float(self._b.dot(x))
        else:
            b = self.bound_map(X)
        if self.objective_fn is None:
            f = -0.5 * (b + float(x.dot(R.ravel()))) if self.bound_map is None \
                else -0.5 * float(np.vdot(X, self.B + R))
        else:
            f = self.objective_fn(X, R)
        rv = (R if self.residual_fn is None else self.residual_fn(R)).ravel()
        r = math.sqrt(float(rv.dot(rv)))
        self.obj.append(f)
        self.bound.append(b)
        self.res.append(r)
        if not (math.isfinite(f) and math.isfinite(r)):
            return self._diverged("non-finite iterate")
        if self.k >= 1:
            prev = self.obj[-2]
            if self.mode == "monotone":
                if f - prev > MM_REL_SLACK * max(abs(prev), abs(f)) + 1e-300:
                    raise MonotonicityViolation(
                        f"{self.name}: objective rose from {prev!r} to {f!r} at iteration {self.k}")
            elif f - prev > NOISE_REL * max(abs(prev), abs(f)):
                self.increases += 1
                if self.increases >= DIVERGENCE_WINDOW:
                    return self._diverged(f"{DIVERGENCE_WINDOW} consecutive objective increases")
            else:
                self.increases = 0
        if self._residual_only:
            hit = r <= self._rtol
        else:
            hit = self.stop.satisfied(self.k, self.obj, b, r, self.bnorm)
        if hit:
            self.status = "converged"
            self.converged = True
            return True
        return self.k >= self.stop.max_iters

    def _diverged(self, why: str) -> bool:
        self.status = "diverged"
        if self.raise_on_divergence:
            raise Divergence(f"{self.name}: {why} at iteration {self.k}")
        return True

    def report(self, X: np.ndarray, rho: float = math.nan, J: Optional[SymMatrix] = None,
               **extra) -> SolveReport:
        if J is not None:
            J.add_flops(self.flops)
        return SolveReport(X, self.k, self.obj, self.bound, self.res, self.flops,
                           self.converged, rho, self.status, self.name, extra)


def _default_stop(stop: Optional[StoppingRule]) -> StoppingRule:
    return stopping_rule() if stop is None else stop


def _start(prob, x0) -> np.ndarray:
    if x0 is None:
        return np.zeros((prob.n, prob.m))
    X = np.array(x0, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape != (prob.n, prob.m):
        raise DimensionMismatch(f"x0 of shape {X.shape} != {(prob.n, prob.m)}")
    return X


def objective(prob: QmpProblem, X) -> float:
    """``1/2 tr(X^T J X) - tr(B^T X)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape != prob.B.shape:
        raise DimensionMismatch(f"X of shape {X.shape} != {prob.B.shape}")
    return 0.5 * float(np.vdot(X, prob.J.data @ X)) - float(np.vdot(prob.B, X))


def solve_mm(prob: QmpProblem, P=None, x0=None, stop: Optional[StoppingRule] = None,
             rate_iters: int = 1000, check_majorizer: bool = False,
             seed: int = 0) -> SolveReport:
    """Majorization-minimization with quadratic surrogate ``P >= J``.

    Each step minimizes the surrogate in closed form, which is the
    preconditioned Jacobi recursion ``X <- X + P^{-1}(B - J X)``. All
    columns of ``B`` are iterated together.

    Raises
    ------
    MonotonicityViolation
        When the objective increases, i.e. ``P - J`` is not PSD.
    """
    J, B = prob.J, prob.B
    P = as_preconditioner(P, prob.n)
    if check_majorizer:
        from .precond import majorizes
        if not majorizes(P, J):
            raise MonotonicityViolation("P - J is not positive semidefinite")
    stop = _default_stop(stop)
    a = J.data
    X = _start(prob, x0)
    R = B - a.dot(X)
    # F is tracked through exact per-step decrements -1/2 d^T (r + r_new);
    # evaluating F(X) afresh carries eps*|x|^T|J||x| of noise, which swamps
    # the true decrease near convergence on ill-conditioned J
    F = [-0.5 * float(np.vdot(X, B + R))]
    tr = _Tracker(B, stop, f"mm[{P.label or P.kind}]", mode="monotone",
                  objective=lambda X, R: F[0])
    per_iter = prob.m * (2 * prob.n * prob.n + P.inverse_flops + 5 * prob.n)
    done = tr.record(X, R)
    while not done:
        D = P.apply_inverse(R)
        X = X + D
        Rn = R - a.dot(D)
        F[0] -= 0.5 * float(np.vdot(D, R + Rn))
        if tr.k % RESIDUAL_REFRESH == RESIDUAL_REFRESH - 1:
            Rn = B - a.dot(X)
        R = Rn
        tr.flops += per_iter
        done = tr.record(X, R)
    rho = iteration_matrix_radius(P, J.data, iters=rate_iters, seed=seed) if rate_iters else math.nan
    return tr.report(X, rho, J)


def _richardson(prob, omega, X, stop, raise_on_divergence):
    a, B = prob.J.data, prob.B
    R = B - a.dot(X)
    tr = _Tracker(B, stop, f"richardson[{omega:.6g}]", raise_on_divergence=raise_on_divergence)
    per_iter = prob.m * (2 * prob.n * prob.n + 3 * prob.n)
    done = tr.record(X, R)
    while not done:
        X = X + omega * R
        R = B - a.dot(X)
        tr.flops += per_iter
        done = tr.record(X, R)
    return tr, X


def _gauss_seidel(prob, X, stop, raise_on_divergence):
    """Cyclic exact coordinate minimization; one iteration is a full sweep.

    A sweep equals the triangular solve ``(D + L) X_new = B - U X_old``.
    """
    a, B = prob.J.data, prob.B
    if np.any(np.diag(a) <= 0):
        raise NotPositiveDefinite("Gauss-Seidel needs a positive diagonal")
    lower = np.asfortranarray(np.tril(a))
    upper = np.triu(a, 1)
    trtrs = sla.get_lapack_funcs("trtrs", (lower,))
    R = B - a.dot(X)
    tr = _Tracker(B, stop, "gauss_seidel", raise_on_divergence=raise_on_divergence)
    per_iter = prob.m * (2 * prob.n * prob.n + 2 * prob.n)
    done = tr.record(X, R)
    while not done:
        X, info = trtrs(lower, B - upper.dot(X), lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"Gauss-Seidel triangular solve failed (info={info})")
        R = B - a.dot(X)
        tr.flops += per_iter
        done = tr.record(X, R)
    return tr, X


def _steepest(prob, X, stop, raise_on_divergence, P: Optional[Preconditioner] = None):
    """Steepest descent with exact line search, one step size per column."""
    a, B = prob.J.data, prob.B
    R = B - a.dot(X)
    name = "steepest" if P is None else f"psteepest[{P.label or P.kind}]"
    tr = _Tracker(B, stop, name, raise_on_divergence=raise_on_divergence)
    pf = 0 if P is None else P.inverse_flops
    per_iter = prob.m * (2 * prob.n * prob.n + pf + 6 * prob.n)
    done = tr.record(X, R)
    while not done:
        D = R if P is None else P.apply_inverse(R)
        Q = a.dot(D)
        num = np.einsum("ij,ij->j", R, D)
        den = np.einsum("ij,ij->j", D, Q)
        active = num > 0
        if np.any(active & (den <= 0)):
            bad = active & (den == 0)
            if np.any(bad):
                raise InternalError("zero curvature along a nonzero search direction")
            raise NotPositiveDefinite("negative curvature: J is not positive definite")
        step = np.where(active, num / np.where(active, den, 1.0), 0.0)
        X = X + D * step
        R = R - Q * step
        tr.flops += per_iter
        done = tr.record(X, R)
    return tr, X


def _cg(prob, X, stop, P: Optional[Preconditioner] = None, raise_on_divergence: bool = True):
    a = prob.J.data
    pinv = None if P is None else P.apply_inverse
    name = "cg" if P is None else f"pcg[{P.label or P.kind}]"
    pf = 0 if P is None else P.inverse_flops
    per_iter = prob.m * (2 * prob.n * prob.n + pf + 10 * prob.n)
    tr = _Tracker(prob.B, stop, name, raise_on_divergence=raise_on_divergence)
    return cg_core(lambda V: a.dot(V), prob.B, X, tr, pinv, per_iter)


def cg_core(matmul: Callable, B: np.ndarray, X: np.ndarray, tr: "_Tracker",
            pinv: Optional[Callable] = None, per_iter: int = 0):
    """(Preconditioned) conjugate gradients, one independent recursion per column.

    Columns advance in lockstep but keep separate step sizes and conjugacy;
    a column whose preconditioned residual norm is exactly zero is frozen.
    Works on any SPD operator given as `matmul`, so the constrained solver
    can run it in reduced coordinates.
    """
    R = B - matmul(X)
    Z = R if pinv is None else pinv(R)
    D = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    done = tr.record(X, R)
    while not done:
        active = rz > 0
        if not np.any(active):
            tr.status, tr.converged = "converged", True
            break
        Q = matmul(D)
        dq = np.einsum("ij,ij->j", D, Q)
        if np.any(active & (dq == 0)):
            raise InternalError("zero search direction with nonzero residual")
        if np.any(active & (dq < 0)):
            raise NotPositiveDefinite("negative curvature: operator is not positive definite")
        alpha = np.where(active, rz / np.where(active, dq, 1.0), 0.0)
        X = X + D * alpha
        R = R - Q * alpha
        Z = R if pinv is None else pinv(R)
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(active, rz_new / np.where(active, rz, 1.0), 0.0)
        D = Z + D * beta
        rz = rz_new
        tr.flops += per_iter
        done = tr.record(X, R)
    return tr, X


def _kappa(J: SymMatrix, P: Optional[Preconditioner] = None, iters: int = 1000,
           seed: int = 0) -> float:
    """Condition number of ``P^{-1} J`` from power-iteration extremes."""
    if P is None:
        s = power_extremes(J, iters=iters, seed=seed)
        return s.lambda_max / s.lambda_min if s.lambda_min > 0 else math.inf
    d = None if P.dense is not None else 1.0 / np.sqrt(P.diag)
    if d is not None:
        M = J.data * d[:, None] * d[None, :]
    else:
        Lc = np.linalg.cholesky(P.dense)
        Li = sla.solve_triangular(Lc, np.eye(P.n), lower=True)
        M = Li @ J.data @ Li.T
    s = power_extremes(SymMatrix(M), iters=iters, seed=seed)
    return s.lambda_max / s.lambda_min if s.lambda_min > 0 else math.inf


def cg_rate(kappa: float) -> float:
    """Root convergence factor ``(sqrt(k) - 1) / (sqrt(k) + 1)`` of (P)CG."""
    if not math.isfinite(kappa):
        return 1.0
    # estimates of kappa can dip below 1 by roundoff
    s = math.sqrt(max(kappa, 1.0))
    return (s - 1.0) / (s + 1.0)


GD_RULES = ("steepest", "richardson", "gauss_seidel", "cg", "pcg")


def solve_gd(prob: QmpProblem, rule: str = "cg", x0=None, stop: Optional[StoppingRule] = None,
             omega: Optional[float] = None, precond=None, rate_iters: int = 1000, seed: int = 0,
             raise_on_divergence: bool = True) -> SolveReport:
    """Gradient-descent family.

    Parameters
    ----------
    rule : {"steepest", "richardson", "gauss_seidel", "cg", "pcg"}
    omega : float, optional
        Fixed step for ``richardson``. Defaults to ``2 / (l_max + l_min)``
        from power-iteration estimates. Stability needs ``omega < 2 / l_max``.
    precond : Preconditioner, optional
        Used by ``pcg`` (default: diagonal of J).
    """
    if rule not in GD_RULES:
        raise ValueError(f"unknown direction rule {rule!r}; expected one of {GD_RULES}")
    J = prob.J
    stop = _default_stop(stop)
    X = _start(prob, x0)
    rho = math.nan
    if rule == "richardson":
        if omega is None or rate_iters:
            s = power_extremes(J, iters=max(rate_iters, 1000), seed=seed)
        if omega is None:
            omega = 2.0 / (s.lambda_max + s.lambda_min)
        if omega <= 0:
            raise ValueError("omega must be positive")
        tr, X = _richardson(prob, omega, X, stop, raise_on_divergence)
        if rate_iters:
            rho = max(abs(1 - omega * s.lambda_max), abs(1 - omega * s.lambda_min))
    elif rule == "gauss_seidel":
        tr, X = _gauss_seidel(prob, X, stop, raise_on_divergence)
    elif rule == "steepest":
        tr, X = _steepest(prob, X, stop, raise_on_divergence)
        if rate_iters:
            k = _kappa(J, iters=rate_iters, seed=seed)
            k = max(k, 1.0)
            rho = (k - 1) / (k + 1) if math.isfinite(k) else 1.0
    else:
        P = None
        if rule == "pcg":
            if precond is None:
                from .precond import diagonal
                P = diagonal(np.diag(J.data), label="diag")
            else:
                P = as_preconditioner(precond, prob.n)
        tr, X = _cg(prob, X, stop, P, raise_on_divergence)
        if rate_iters:
            rho = cg_rate(_kappa(J, P, iters=rate_iters, seed=seed))
    return tr.report(X, rho, J)


def iterations_to_within(report: SolveReport, ref: float, fractions: Sequence[float]) -> list:
    """First iteration whose bound estimate is within ``f * |ref|`` of `ref`, per fraction.

    Returns ``NOT_REACHED`` (None) for fractions never attained.
    """
    if ref == 0:
        raise ValueError("reference must be nonzero")
    traj = np.asarray(report.bound_trajectory if isinstance(report, SolveReport) else report)
    if traj.size == 0:
        raise ValueError("empty bound trajectory")
    err = np.abs(traj - ref)
    out = []
    for f in fractions:
        hit = np.flatnonzero(err <= f * abs(ref))
        out.append(int(hit[0]) if hit.size else NOT_REACHED)
    return out


TRAJECTORY_COLUMNS = ("iter", "objective", "bound_estimate", "residual_norm")


def write_trajectory_csv(path, report: SolveReport) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for k, (f, b, r) in enumerate(zip(report.objective_trajectory,
                                          report.bound_trajectory,
                                          report.residual_trajectory)):
            # + 0.0 folds negative zero
            w.writerow([k, repr(f + 0.0), repr(b + 0.0), repr(r + 0.0)])
    tmp.replace(path)
