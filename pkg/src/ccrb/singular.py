"""Minimum-norm solutions ``J^+ B`` for singular Fisher matrices.

All solvers minimize ``1/2 ||B - J X||_F^2``. Started from ``X = 0`` every
iterate stays in range(J), so the limit is the minimum-norm solution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, InvalidStep, NotInRange
from .matrix import SymMatrix, as_sym, power_extremes
from .precond import Preconditioner, as_preconditioner, identity
from .solvers import SolveReport, StoppingRule, _Tracker, stopping_rule

PLATEAU_WINDOW = 50
PLATEAU_REL_DECREASE = 1e-6
NU_SAFETY = 1.01


@dataclass(frozen=True, eq=False)
class SingularProblem:
    """PSD (possibly rank-deficient) ``J`` with right-hand sides in range(J)."""

    J: SymMatrix
    B: np.ndarray
    range_tol: float = 1e-8

    def __post_init__(self):
        J = as_sym(self.J)
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.ndim != 2 or B.shape[0] != J.n:
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


def _start(prob: SingularProblem, x0, allow_nonzero_x0: bool) -> np.ndarray:
    if x0 is None:
        return np.zeros((prob.n, prob.m))
    X = np.array(x0, dtype=float).reshape(prob.n, -1)
    if X.shape != (prob.n, prob.m):
        raise DimensionMismatch(f"x0 of shape {X.shape} != {(prob.n, prob.m)}")
    if np.any(X) and not allow_nonzero_x0:
        raise ValueError("nonzero x0 loses the minimum-norm guarantee; "
                         "pass allow_nonzero_x0=True to get J^+ B + (I - J^+ J) x0")
    return X


def _lsq_objective(X, R):
    return 0.5 * float(np.vdot(R, R))


class _PlateauGuard:
    """Flags NotInRange when the residual stalls above ``range_tol * ||B||``."""

    def __init__(self, prob: SingularProblem):
        self.floor = prob.range_tol * float(np.linalg.norm(prob.B))

    def check(self, res: list, name: str) -> None:
        k = len(res) - 1
        if k < PLATEAU_WINDOW:
            return
        now, then = res[-1], res[-1 - PLATEAU_WINDOW]
        if now > self.floor and now >= (1.0 - PLATEAU_REL_DECREASE) * then:
            raise NotInRange(f"{name}: residual {now:.3e} stalled for {PLATEAU_WINDOW} "
                             f"iterations; B is not in range(J)")


def _default_stop(stop):
    return stopping_rule("residual_norm", 1e-10) if stop is None else stop


def landweber_step(J, nu: float | str = "auto", seed: int = 0) -> float:
    """Step parameter ``nu`` with ``nu >= lambda_1(J^2)``.

    ``"auto"`` gives ``1.01 * lambda_1(J)^2`` from power iteration.
    """
    J = as_sym(J)
    lam = abs(power_extremes(J, seed=seed).spectral_radius)
    if isinstance(nu, str):
        if nu != "auto":
            raise ValueError(f"nu must be a number or 'auto', got {nu!r}")
        return NU_SAFETY * lam * lam if lam > 0 else 1.0
    if nu < lam * lam * (1.0 - 1e-10):
        raise InvalidStep(f"nu={nu} is below lambda_1(J^2) ~ {lam * lam:.6g}")
    return float(nu)


def solve_normal_mm(prob: SingularProblem, P, x0=None, stop: Optional[StoppingRule] = None,
                    allow_nonzero_x0: bool = False) -> SolveReport:
    """MM on the least-squares objective: ``X <- X + P^{-1} J (B - J X)``.

    Needs ``P >= J^2`` for monotone descent.
    """
    J, B = prob.J, prob.B
    P = as_preconditioner(P, prob.n)
    stop = _default_stop(stop)
    a = J.data
    X = _start(prob, x0, allow_nonzero_x0)
    R = B - a.dot(X)
    name = f"normal_mm[{P.label or P.kind}]"
    tr = _Tracker(B, stop, name, mode="monotone", objective=_lsq_objective)
    guard = _PlateauGuard(prob)
    per_iter = prob.m * (4 * prob.n * prob.n + P.inverse_flops + 3 * prob.n)
    done = tr.record(X, R)
    while not done:
        X = X + P.apply_inverse(a.dot(R))
        R = B - a.dot(X)
        tr.flops += per_iter
        done = tr.record(X, R)
        if not done:
            guard.check(tr.res, name)
    return tr.report(X, math.nan, J)


def solve_landweber(prob: SingularProblem, nu: float | str = "auto", x0=None,
                    stop: Optional[StoppingRule] = None,
                    allow_nonzero_x0: bool = False) -> SolveReport:
    """Landweber iteration: normal-equation MM with ``P = nu I``.

    Raises
    ------
    InvalidStep
        If `nu` is below the estimate of ``lambda_1(J^2)``.
    NotInRange
        If the residual stalls above ``range_tol * ||B||``.
    """
    nu = landweber_step(prob.J, nu)
    P = identity(prob.n, nu)
    P = Preconditioner(P.kind, P.n, diag=P.diag, label=f"landweber nu={nu:.6g}")
    rep = solve_normal_mm(prob, P, x0, stop, allow_nonzero_x0)
    rep.solver = "landweber"
    rep.rho_predicted = _landweber_rate(prob.J, nu)
    return rep


def _landweber_rate(J: SymMatrix, nu: float) -> float:
    # slowest mode lives on the smallest nonzero eigenvalue
    w = np.linalg.eigvalsh(J.data)
    nz = np.abs(w) > 1e-12 * np.max(np.abs(w)) if np.any(w) else np.zeros_like(w, bool)
    if not np.any(nz):
        return 0.0
    lam = np.abs(w[nz])
    return float(max(abs(1 - lam.min() ** 2 / nu), abs(1 - lam.max() ** 2 / nu)))


def solve_cg_normal(prob: SingularProblem, x0=None, stop: Optional[StoppingRule] = None,
                    allow_nonzero_x0: bool = False) -> SolveReport:
    """Conjugate gradients on ``J^2 X = J B`` (CGLS form), column by column in lockstep."""
    J, B = prob.J, prob.B
    stop = _default_stop(stop)
    a = J.data
    X = _start(prob, x0, allow_nonzero_x0)
    R = B - a.dot(X)
    S = a.dot(R)
    D = S.copy()
    ss = np.einsum("ij,ij->j", S, S)
    tr = _Tracker(B, stop, "cg_normal", objective=_lsq_objective)
    guard = _PlateauGuard(prob)
    per_iter = prob.m * (4 * prob.n * prob.n + 10 * prob.n)
    done = tr.record(X, R)
    snorm0 = float(np.sqrt(ss.sum()))
    while not done:
        active = ss > 0
        if not np.any(active):
            break
        Q = a.dot(D)
        qq = np.einsum("ij,ij->j", Q, Q)
        alpha = np.where(active & (qq > 0), ss / np.where(qq > 0, qq, 1.0), 0.0)
        X = X + D * alpha
        R = R - Q * alpha
        S = a.dot(R)
        ss_new = np.einsum("ij,ij->j", S, S)
        beta = np.where(active, ss_new / np.where(active, ss, 1.0), 0.0)
        D = S + D * beta
        ss = ss_new
        tr.flops += per_iter
        done = tr.record(X, R)
        if not done:
            guard.check(tr.res, "cg_normal")
    if not tr.converged and tr.res[-1] > guard.floor:
        # normal residual vanished but B - J X did not: inconsistent system
        if np.sqrt(ss.sum()) <= 1e-12 * max(snorm0, 1e-300):
            raise NotInRange("cg_normal: normal equations solved but residual remains; "
                             "B is not in range(J)")
    return tr.report(X, math.nan, J)
