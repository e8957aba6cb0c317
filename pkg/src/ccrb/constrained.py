"""Equality-constrained CRB.

With constraint gradient ``H`` (n x p, full column rank) and an orthonormal
basis ``U`` of the nullspace of ``H^T``, the constrained bound is
``U (U^T J U)^{-1} U^T`` and the constrained program

    minimize 1/2 tr(X^T J X) - tr(B^T X)   subject to  H^T X = 0

is solved by ``X* = U (U^T J U)^{-1} U^T B``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import (DimensionMismatch, InfeasibleStart, NotPositiveDefinite,
                     RankDeficientConstraints, SingularReducedFisher)
from .matrix import SymMatrix, as_sym, direct_solve, iteration_matrix_radius
from .precond import Preconditioner, as_preconditioner, identity
from .solvers import (SolveReport, StoppingRule, _Tracker, cg_core, cg_rate,
                      stopping_rule)

RANK_TOL = 1e-10


def _as_H(H, n: Optional[int] = None) -> np.ndarray:
    if isinstance(H, str):
        if H != "sum-to-zero":
            raise ValueError(f"unknown constraint token {H!r}")
        if n is None:
            raise ValueError("sum-to-zero needs the dimension n")
        return np.ones((n, 1))
    H = np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = H[:, None]
    if H.ndim != 2:
        raise DimensionMismatch("H must be an n x p matrix")
    if n is not None and H.shape[0] != n:
        raise DimensionMismatch(f"H has {H.shape[0]} rows, expected {n}")
    return H


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Gradient ``H`` of ``p`` nonredundant equality constraints."""

    H: np.ndarray

    def __post_init__(self):
        H = _as_H(self.H).copy()
        p = H.shape[1]
        if p > H.shape[0]:
            raise RankDeficientConstraints(f"{p} constraints on {H.shape[0]} parameters")
        if p:
            s = np.linalg.svd(H, compute_uv=False)
            if s[0] == 0 or s[-1] <= RANK_TOL * s[0]:
                raise RankDeficientConstraints(
                    f"rank(H) < p={p} (singular values {s[0]:.3e} .. {s[-1]:.3e})")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.H.shape[1]

    @classmethod
    def sum_to_zero(cls, n: int) -> "ConstraintSet":
        return cls(np.ones((n, 1)))

    @classmethod
    def none(cls, n: int) -> "ConstraintSet":
        return cls(np.zeros((n, 0)))


class NullBasis:
    """Orthonormal basis of ``{x : H^T x = 0}`` kept in Householder form.

    ``Q = H_1 ... H_p`` from the QR factorization of ``H``; the basis is the
    last ``n - p`` columns of ``Q``. Products with ``U`` and ``U^T`` cost
    ``O(n p)``; the dense matrix is built only on request.
    """

    def __init__(self, H):
        cs = H if isinstance(H, ConstraintSet) else ConstraintSet(H)
        self.n, self.p = cs.n, cs.p
        if self.p:
            h, tau = np.linalg.qr(cs.H, mode="raw")
            # h is the transposed LAPACK output: reflector i lives in row i
            v = np.zeros((self.p, self.n))
            for i in range(self.p):
                v[i, i] = 1.0
                v[i, i + 1:] = h[i, i + 1:]
            self._v = v
            self._tau = np.asarray(tau, dtype=float)
        else:
            self._v = np.zeros((0, self.n))
            self._tau = np.zeros(0)

    def _q(self, X: np.ndarray) -> np.ndarray:
        for i in range(self.p - 1, -1, -1):
            v = self._v[i]
            X = X - self._tau[i] * np.outer(v, v @ X) if X.ndim == 2 else X - self._tau[i] * v * (v @ X)
        return X

    def _qt(self, X: np.ndarray) -> np.ndarray:
        for i in range(self.p):
            v = self._v[i]
            X = X - self._tau[i] * np.outer(v, v @ X) if X.ndim == 2 else X - self._tau[i] * v * (v @ X)
        return X

    def apply(self, Y: np.ndarray) -> np.ndarray:
        """``U @ Y``."""
        Y = np.asarray(Y, dtype=float)
        pad = np.zeros((self.p,) + Y.shape[1:])
        return self._q(np.concatenate([pad, Y], axis=0))

    def apply_t(self, X: np.ndarray) -> np.ndarray:
        """``U.T @ X``."""
        return self._qt(np.asarray(X, dtype=float))[self.p:]

    @cached_property
    def U(self) -> np.ndarray:
        U = self.apply(np.eye(self.n - self.p))
        U.setflags(write=False)
        return U

    @property
    def flops_per_apply(self) -> int:
        return 4 * self.n * self.p


def null_basis(H) -> NullBasis:
    """Orthonormal nullspace basis of ``H^T`` via Householder QR.

    Raises
    ------
    RankDeficientConstraints
        If ``rank(H) < p``.
    """
    return NullBasis(H)


@dataclass(frozen=True, eq=False)
class ConstrainedQmpProblem:
    """``(J, B, H)``: only ``U^T J U`` needs to be nonsingular, J may be PSD."""

    J: SymMatrix
    B: np.ndarray
    constraints: ConstraintSet

    def __post_init__(self):
        J = as_sym(self.J)
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.ndim != 2 or B.shape[0] != J.n:
            raise DimensionMismatch(f"B of shape {B.shape} does not match n={J.n}")
        cs = self.constraints
        if not isinstance(cs, ConstraintSet):
            cs = ConstraintSet(_as_H(cs, J.n))
        if cs.n != J.n:
            raise DimensionMismatch(f"H has {cs.n} rows, expected {J.n}")
        B = B.copy()
        B.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "constraints", cs)

    @property
    def n(self) -> int:
        return self.J.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def H(self) -> np.ndarray:
        return self.constraints.H

    @cached_property
    def basis(self) -> NullBasis:
        return NullBasis(self.constraints)

    def project(self, X: np.ndarray) -> np.ndarray:
        """Euclidean projection onto ``{X : H^T X = 0}``."""
        U = self.basis
        return U.apply(U.apply_t(X))

    def reduced_norm(self, R: np.ndarray) -> float:
        return float(np.linalg.norm(self.basis.apply_t(R)))


def _reduced_fisher(prob: ConstrainedQmpProblem) -> np.ndarray:
    U = prob.basis
    JU = prob.J.data @ U.U
    return U.apply_t(JU)


def constrained_crb_oracle(prob: ConstrainedQmpProblem) -> np.ndarray:
    """``X* = U (U^T J U)^{-1} U^T B`` by Cholesky in the reduced space.

    Raises
    ------
    SingularReducedFisher
        If ``U^T J U`` is not positive definite.
    """
    U = prob.basis
    if prob.n - prob.constraints.p == 0:
        return np.zeros_like(prob.B)
    A = _reduced_fisher(prob)
    try:
        Y = direct_solve(SymMatrix(A), U.apply_t(prob.B))
    except NotPositiveDefinite as exc:
        raise SingularReducedFisher(str(exc)) from exc
    return U.apply(Y)


def constrained_crb_via_inverse(J, B, H) -> np.ndarray:
    """``J^{-1}B - J^{-1}H (H^T J^{-1} H)^+ H^T J^{-1} B`` for nonsingular J."""
    J = as_sym(J)
    B = np.asarray(B, dtype=float)
    H = _as_H(H, J.n)
    JiB = direct_solve(J, B)
    if H.shape[1] == 0:
        return JiB
    JiH = direct_solve(J, H)
    M = np.linalg.pinv(H.T @ JiH)
    return JiB - JiH @ (M @ (H.T @ JiB))


def constrained_fisher_bound(J, H) -> np.ndarray:
    """Full constrained CRB matrix ``U (U^T J U)^{-1} U^T``."""
    J = as_sym(J)
    return constrained_crb_oracle(ConstrainedQmpProblem(J, np.eye(J.n), ConstraintSet(_as_H(H, J.n))))


class Projector:
    """Oblique projector ``T = I - P^{-1} H (H^T P^{-1} H)^{-1} H^T``.

    ``T`` is idempotent, ``H^T T = 0``, and ``T P^{-1}`` is the symmetric
    operator ``P^{-1} - P^{-1} H (H^T P^{-1} H)^{-1} H^T P^{-1}``.

    Raises
    ------
    RankDeficientConstraints
        If ``H^T P^{-1} H`` is singular.
    """

    def __init__(self, H: np.ndarray, P: Preconditioner):
        self.H = H
        self.p = H.shape[1]
        if self.p:
            self.PiH = P.apply_inverse(H)
            G = H.T @ self.PiH
            try:
                self._c = sla.cho_factor(G, lower=True)
            except sla.LinAlgError as exc:
                raise RankDeficientConstraints(f"H^T P^-1 H is singular: {exc}") from exc

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if not self.p:
            return X
        return X - self.PiH @ sla.cho_solve(self._c, self.H.T @ X)

    def dense(self) -> np.ndarray:
        return self(np.eye(self.H.shape[0]))

    @property
    def flops_per_apply(self) -> int:
        n, p = self.H.shape
        return 4 * n * p + 2 * p * p


def projection_operator(H, P=None) -> np.ndarray:
    """Dense ``T`` for inspection and tests."""
    H = _as_H(H)
    return Projector(H, as_preconditioner(P, H.shape[0])).dense()


def _feasible_start(prob: ConstrainedQmpProblem, x0, project_x0: bool) -> np.ndarray:
    if x0 is None:
        return np.zeros((prob.n, prob.m))
    X = np.array(x0, dtype=float).reshape(prob.n, -1)
    if X.shape != (prob.n, prob.m):
        raise DimensionMismatch(f"x0 of shape {X.shape} != {(prob.n, prob.m)}")
    H = prob.H
    viol = np.linalg.norm(H.T @ X)
    if viol > 1e-10 * max(np.linalg.norm(H) * np.linalg.norm(X), 1e-300):
        if not project_x0:
            raise InfeasibleStart(f"||H^T x0|| = {viol:.3e}")
        warnings.warn("x0 is infeasible; projecting onto H^T x = 0", stacklevel=3)
        X = prob.project(X)
    return X


def _default_stop(stop):
    return stopping_rule("residual_norm", 1e-10) if stop is None else stop


def solve_constrained_mm(prob: ConstrainedQmpProblem, P=None, x0=None,
                         stop: Optional[StoppingRule] = None, rate_iters: int = 1000,
                         project_x0: bool = False, seed: int = 0) -> SolveReport:
    """Constrained MM: ``X <- T (X + P^{-1} (B - J X))``.

    Each step minimizes the quadratic surrogate with curvature ``P >= J``
    over the constraint set, so the objective is nonincreasing and every
    iterate satisfies ``H^T X = 0``. With no constraints the recursion is
    bitwise the unconstrained MM step.
    """
    J, B = prob.J, prob.B
    P = as_preconditioner(P, prob.n)
    T = Projector(prob.H, P)
    stop = _default_stop(stop)
    a = J.data
    X = _feasible_start(prob, x0, project_x0)
    R = B - a.dot(X)
    name = f"cmm[{P.label or P.kind}]"
    resfn = prob.basis.apply_t if prob.constraints.p else None
    tr = _Tracker(B, stop, name, mode="monotone", residual_fn=resfn)
    per_iter = prob.m * (2 * prob.n * prob.n + P.inverse_flops + 3 * prob.n
                         + (T.flops_per_apply if T.p else 0))
    done = tr.record(X, R)
    while not done:
        X = X + P.apply_inverse(R)
        if T.p:
            X = T(X)
        R = B - a.dot(X)
        tr.flops += per_iter
        done = tr.record(X, R)
    rho = math.nan
    if rate_iters:
        rho = iteration_matrix_radius(P, a, iters=rate_iters, seed=seed,
                                      project=T if T.p else None)
    return tr.report(X, rho, J)


def _reduced_kappa(prob: ConstrainedQmpProblem, P: Preconditioner, iters: int,
                   seed: int = 0) -> float:
    """Condition number of the preconditioned reduced operator ``(U^T P U)^{-1} U^T J U``.

    Computed on ``T P^{-1} J`` restricted to the feasible subspace, which is
    self-adjoint in the P-inner product.
    """
    from .matrix import _power_dominant, _start_vector

    a = prob.J.data
    T = Projector(prob.H, P)
    x0 = _start_vector(prob.n, seed)
    if T.p:
        x0 = T(x0)

    def op(x):
        y = P.apply_inverse(a.dot(x))
        return T(y) if T.p else y

    def inner(u, v):
        return float(u @ P.apply(v))

    lmax, _, _, _ = _power_dominant(op, x0, iters, 1e-10, inner)
    # re-project: roundoff must not leak into directions where op vanishes
    mu, _, _, _ = _power_dominant(lambda x: T(lmax * x - op(x)) if T.p else lmax * x - op(x),
                                  x0, iters, 1e-10, inner)
    lmin = lmax - mu
    return lmax / lmin if lmin > 0 else math.inf


def solve_constrained_pcg(prob: ConstrainedQmpProblem, P=None, x0=None,
                          stop: Optional[StoppingRule] = None, rate_iters: int = 1000,
                          project_x0: bool = False, variant: str = "reduced",
                          seed: int = 0) -> SolveReport:
    """Constrained preconditioned conjugate gradients.

    ``variant="reduced"`` runs PCG on ``Y`` with operator ``U^T J U`` and
    preconditioner inverse ``U^T T P^{-1} U`` (which equals
    ``(U^T P U)^{-1}``), then returns ``X = U Y``. ``variant="projected"``
    runs the same recursion in full coordinates with the projected
    preconditioner ``T P^{-1}``.
    """
    J, B = prob.J, prob.B
    P = as_preconditioner(P, prob.n)
    T = Projector(prob.H, P)
    stop = _default_stop(stop)
    a = J.data
    X0 = _feasible_start(prob, x0, project_x0)
    name = f"cpcg[{P.label or P.kind}]"
    n, m = prob.n, prob.m
    if variant == "reduced":
        U = prob.basis
        ub = U.flops_per_apply

        def matmul(Y):
            return U.apply_t(a.dot(U.apply(Y)))

        def pinv(Rr):
            return U.apply_t(T(P.apply_inverse(U.apply(Rr))))

        Br = U.apply_t(B)
        tr = _Tracker(Br, stop, name)
        per_iter = m * (2 * n * n + P.inverse_flops + T.flops_per_apply + 4 * ub + 10 * n)
        tr, Y = cg_core(matmul, Br, U.apply_t(X0), tr, pinv, per_iter)
        X = U.apply(Y)
    elif variant == "projected":
        def pinv(R):
            Z = P.apply_inverse(R)
            return T(Z) if T.p else Z

        resfn = prob.basis.apply_t if prob.constraints.p else None
        tr = _Tracker(B, stop, name + "/projected", residual_fn=resfn)
        per_iter = m * (2 * n * n + P.inverse_flops + T.flops_per_apply + 10 * n)
        tr, X = cg_core(lambda V: a.dot(V), B, X0, tr, pinv, per_iter)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    rho = cg_rate(_reduced_kappa(prob, P, rate_iters, seed)) if rate_iters else math.nan
    return tr.report(X, rho, J)


def solve_gradient_projection(prob: ConstrainedQmpProblem, P=None, x0=None,
                              stop: Optional[StoppingRule] = None,
                              raise_on_divergence: bool = False,
                              project_x0: bool = False) -> SolveReport:
    """Projected (preconditioned) steepest descent with exact line search.

    Kept for benchmark parity; on ill-conditioned problems it typically
    fails to converge within the breakeven budget.
    """
    J, B = prob.J, prob.B
    P = identity(prob.n) if P is None else as_preconditioner(P, prob.n)
    T = Projector(prob.H, P)
    stop = _default_stop(stop)
    a = J.data
    X = _feasible_start(prob, x0, project_x0)
    R = B - a.dot(X)
    resfn = prob.basis.apply_t if prob.constraints.p else None
    tr = _Tracker(B, stop, f"gp[{P.label or P.kind}]", residual_fn=resfn,
                  raise_on_divergence=raise_on_divergence)
    per_iter = prob.m * (2 * prob.n * prob.n + P.inverse_flops + T.flops_per_apply + 6 * prob.n)
    done = tr.record(X, R)
    while not done:
        D = P.apply_inverse(R)
        if T.p:
            D = T(D)
        Q = a.dot(D)
        num = np.einsum("ij,ij->j", R, D)
        den = np.einsum("ij,ij->j", D, Q)
        ok = (num > 0) & (den > 0)
        step = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        if not np.any(ok):
            tr.status, tr.converged = "stalled", False
            break
        X = X + D * step
        R = R - Q * step
        tr.flops += per_iter
        done = tr.record(X, R)
    return tr.report(X, math.nan, J)


def gs_two_solve_composition(J, b, H=None, stop: Optional[StoppingRule] = None) -> SolveReport:
    """Constrained solution from two Gauss-Seidel solves.

    Sweeps ``u ~ J^{-1} b`` and ``V ~ J^{-1} H`` together and, after every
    sweep, composes ``x = u - V (H^T V)^+ H^T u``. The bound trajectory is
    ``b^T x`` of the composed iterate.
    """
    J = as_sym(J)
    n = J.n
    b = np.asarray(b, dtype=float).reshape(n, -1)
    if b.shape[1] != 1:
        raise DimensionMismatch("gs_two_solve_composition takes a single right-hand side")
    H = np.ones((n, 1)) if H is None else _as_H(H, n)
    p = H.shape[1]
    prob = ConstrainedQmpProblem(J, b, ConstraintSet(H))
    stop = _default_stop(stop)
    a = J.data
    if np.any(np.diag(a) <= 0):
        raise NotPositiveDefinite("Gauss-Seidel needs a positive diagonal")
    lower, upper = np.tril(a), np.triu(a, 1)
    rhs = np.hstack([b, H])
    W = np.zeros((n, 1 + p))
    Rw = rhs.copy()

    def compose(W, Rw):
        u, V = W[:, :1], W[:, 1:]
        ru, RV = Rw[:, :1], Rw[:, 1:]
        c = np.linalg.pinv(H.T @ V) @ (H.T @ u)
        x = u - V @ c
        # J x = (b - ru) - (H - RV) c
        r = ru + (H - RV) @ c
        return x, r

    resfn = prob.basis.apply_t if p else None
    tr = _Tracker(b, stop, "gs_composition", residual_fn=resfn)
    per_iter = (1 + p) * (4 * n * n + 2 * n) + 4 * n * p
    x, r = compose(W, Rw)
    done = tr.record(x, r)
    while not done:
        W = sla.solve_triangular(lower, rhs - upper @ W, lower=True, check_finite=False)
        Rw = rhs - a.dot(W)
        x, r = compose(W, Rw)
        tr.flops += per_iter
        done = tr.record(x, r)
    return tr.report(x, math.nan, J)
