"""Sampling-rate design for the flow sampling sketcher (FSS).

Model
-----
Flows are sampled independently with probability ``p`` and hashed into an
array of counters. Under the Poisson approximation a counter's value has
generating function

    C(s) = prod_k exp(a' theta_k (s^k - 1)),      a' = p * alpha,

where ``alpha`` is the number of flows per counter at ``p = 1``. Counter
value ``i`` has probability ``c_i`` and ``dc_i/dtheta_k = a' (c_{i-k} - c_i)``.

Fisher information per flow, with ``q = 1 - p``::

    J(p) = q 1 1^T + (1 / alpha) sum_{i >= 1} d_i d_i^T / c_i
         = q 1 1^T + p a' G^T W G,     G[i, k] = c_{i-k} - c_i,  W = diag(1 / c_i)

The second term is the expected information of the histogram of nonzero
counter values (independent Poisson bin counts with means proportional to
``c_i``); the rank-one term is the information of a Poisson count with mean
proportional to ``q sum(theta)``. Both are checked against a
finite-difference Hessian of that log-likelihood in the tests.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constrained import (ConstrainedQmpProblem, ConstraintSet, constrained_crb_oracle,
                          gs_two_solve_composition, solve_constrained_mm,
                          solve_constrained_pcg, solve_gradient_projection)
from .errors import TruncationError, WeightUnderflow
from .matrix import SymMatrix
from .precond import complete_data, diagonally_dominant
from .solvers import SolveReport, StoppingRule, objective, stopping_rule

UNDERFLOW = 1e-300
K_CAP = 1 << 22
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class FlowModel:
    """Flow size distribution ``theta`` (sizes 1..n), base load ``alpha``, rate ``p``."""

    theta: np.ndarray
    alpha: float
    p: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        if theta.size < 1:
            raise ValueError("theta must be nonempty")
        if not np.all(theta > 0):
            raise ValueError("theta must be strictly positive")
        if abs(theta.sum() - 1.0) > 1e-12:
            raise ValueError(f"theta must sum to 1 (got {theta.sum()!r})")
        if not 0 < self.p <= 1:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.p}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def n(self) -> int:
        return self.theta.size

    @property
    def alpha_prime(self) -> float:
        return self.p * self.alpha

    @property
    def q(self) -> float:
        return 1.0 - self.p

    def at_rate(self, p: float) -> "FlowModel":
        return FlowModel(self.theta, self.alpha, p)


@dataclass(frozen=True)
class LoadDistribution:
    c: np.ndarray
    alpha_prime: float

    @property
    def K(self) -> int:
        return self.c.size - 1

    @property
    def tail(self) -> float:
        return max(0.0, 1.0 - float(self.c.sum()))


@dataclass(frozen=True)
class FssFisher:
    J: SymMatrix
    p: float
    K_used: int
    dropped_rows: int = 0


def zipf_distribution(n: int = 200, exponent: float = 1.5) -> np.ndarray:
    """Truncated Zipf proportions ``k^-exponent / sum``, k = 1..n."""
    w = np.arange(1, n + 1, dtype=float) ** -exponent
    return w / w.sum()


def _extend(c: np.ndarray, ka: np.ndarray, K: int) -> np.ndarray:
    """Extend coefficients of ``exp(sum_k a_k s^k)`` up to degree K.

    ``i c_i = sum_k k a_k c_{i-k}``, all terms nonnegative. `ka` holds
    ``k a_k`` for k = 1..n.
    """
    start = c.size
    if K + 1 <= start:
        return c[:K + 1]
    out = np.empty(K + 1)
    out[:start] = c
    n = ka.size
    rka = ka[::-1]
    for i in range(start, K + 1):
        lo = max(0, i - n)
        out[i] = (rka[n - (i - lo):] @ out[lo:i]) / i
    return out


def load_distribution(theta, alpha_prime: float, K="auto", tail_tol: float = 1e-12,
                      K_cap: int = K_CAP) -> LoadDistribution:
    """Counter load distribution ``c_0..c_K``.

    `theta` need not sum to one here (the gradient is taken with respect to
    unconstrained ``theta``); then ``c_0 = exp(-a' sum(theta))``. With
    ``K="auto"`` the length doubles until ``1 - sum(c) <= tail_tol`` and the
    last n coefficients together hold at most ``10 * tail_tol``.

    Raises
    ------
    TruncationError
        If the tail cannot be made small enough below `K_cap`.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    ka = alpha_prime * theta * np.arange(1, theta.size + 1)
    c = np.array([math.exp(-alpha_prime * theta.sum())])
    if K != "auto":
        return LoadDistribution(_extend(c, ka, int(K)), alpha_prime)
    total = alpha_prime * theta.sum()
    n = theta.size
    Kc = max(2 * n, 64)

    def first_ok(c):
        # smallest K with tail(K) <= tol and tail(K - n) <= 10 tol; the second
        # condition keeps the mass dropped from the gradient columns small too
        tail = 1.0 - np.cumsum(c)
        ok = tail <= tail_tol
        ok[n:] &= tail[:-n] <= 10 * tail_tol
        ok[:n] = False
        return int(np.argmax(ok)) if ok.any() else None

    while True:
        c = _extend(c, ka, Kc)
        K_used = first_ok(c)
        if K_used is not None:
            break
        if Kc >= K_cap:
            raise TruncationError(f"tail {1 - c.sum():.3e} > {tail_tol} at K={Kc} "
                                  f"(a' * sum(theta) = {total:.4g})")
        Kc = min(2 * Kc, K_cap)
    return LoadDistribution(c[:K_used + 1].copy(), alpha_prime)


def load_gradient(theta, alpha_prime: float, c) -> np.ndarray:
    """``D[i, k-1] = dc_i/dtheta_k = a' (c_{i-k} - c_i)`` for i = 0..K, k = 1..n."""
    c = c.c if isinstance(c, LoadDistribution) else np.asarray(c, dtype=float)
    n = np.asarray(theta).size
    K = c.size - 1
    D = np.zeros((K + 1, n))
    for k in range(1, min(n, K) + 1):
        D[k:, k - 1] = c[:K + 1 - k]
    D -= c[:, None]
    return alpha_prime * D


def _counter_rows(model: FlowModel, c: np.ndarray):
    D = load_gradient(model.theta, model.alpha_prime, c)[1:]
    ci = c[1:]
    keep = ci >= UNDERFLOW
    return D[keep], ci[keep], int((~keep).sum())


def _increments(model: FlowModel, c: np.ndarray) -> np.ndarray:
    """``||J_K - J_{K-1}||_F`` for K = 1..len(c)-1 (0 for underflowed rows)."""
    D = load_gradient(model.theta, model.alpha_prime, c)[1:]
    ci = c[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        inc = np.where(ci >= UNDERFLOW, np.einsum("ij,ij->i", D, D) / ci, 0.0)
    return inc / model.alpha


def truncation_K(model: FlowModel, delta: float = 1e-8, K_cap: int = K_CAP) -> int:
    """Smallest K with ``||J_K - J_{K-1}||_F < delta``, by doubling then bisection.

    Raises
    ------
    TruncationError
        If no K below `K_cap` qualifies.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    theta = model.theta
    ka = model.alpha_prime * theta * np.arange(1, model.n + 1)
    c = np.array([math.exp(-model.alpha_prime * theta.sum())])

    def inc(K):
        nonlocal c
        c = _extend(c, ka, K) if c.size <= K else c
        return _increments(model, c[:K + 1])[K - 1]

    K = 1
    while not inc(K) < delta:
        if K >= K_cap:
            raise TruncationError(f"Fisher increment still >= {delta} at K={K}")
        K = min(2 * K, K_cap)
    lo, hi = K // 2, K
    # invariant: inc(hi) < delta, inc(lo) >= delta (or lo == 0)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if inc(mid) < delta:
            hi = mid
        else:
            lo = mid
    return hi


def fss_fisher(model: FlowModel, K: Optional[int] = None, delta: float = 1e-8,
               tail_tol: float = 1e-12) -> FssFisher:
    """Assemble ``J(p) = q 1 1^T + (1/alpha) sum_{i=1}^K d_i d_i^T / c_i``.

    K defaults to ``truncation_K(model, delta)``. Rows whose ``c_i`` falls
    below 1e-300 are dropped with a WeightUnderflow warning.
    """
    if K is None:
        K = truncation_K(model, delta)
    c = load_distribution(model.theta, model.alpha_prime, K=K).c
    D, ci, dropped = _counter_rows(model, c)
    if dropped:
        warnings.warn(f"{dropped} counter values with c_i < {UNDERFLOW} dropped",
                      WeightUnderflow, stacklevel=2)
    Dw = D / np.sqrt(ci)[:, None]
    J = (Dw.T @ Dw) / model.alpha
    if model.q:
        J = J + model.q
    return FssFisher(SymMatrix(J), model.p, int(K), dropped)


def complete_data_preconditioner(model: FlowModel):
    """``diag(1 / theta)``: per-flow Fisher information when every flow is observed.

    Dominates ``J(p)`` for every p when ``sum(theta) = 1``.
    """
    return complete_data(model.theta, 1.0)


def _selector(n: int, k_target, block) -> np.ndarray:
    if block is not None:
        k, l = block
        if not 1 <= k <= l <= n:
            raise ValueError(f"block {block} outside 1..{n}")
        return np.eye(n)[:, k - 1:l]
    if not 1 <= k_target <= n:
        raise ValueError(f"k_target={k_target} outside 1..{n}")
    return np.eye(n)[:, [k_target - 1]]


SOLVERS = ("direct", "cpcg", "cmm-cf", "cmm-dd", "gp", "gs")


@dataclass
class RateEvaluation:
    p: float
    crb: float
    block: np.ndarray
    iterations: int = 0
    flops: int = 0
    K_used: int = 0
    inner_value: float = math.nan
    status: str = "converged"


def crb_at_rate(model: FlowModel, k_target: int = 1, block=None, solver: str = "direct",
                stop: Optional[StoppingRule] = None, delta: float = 1e-8,
                fisher: Optional[FssFisher] = None) -> RateEvaluation:
    """Constrained CRB of ``theta_k`` (1-based) or of a block ``[k, l]`` at rate ``model.p``.

    The scalar result is ``tr(B^T X*)``, i.e. ``[I+(p)]_kk`` or the trace of
    the block; ``inner_value`` is the inner optimum ``g = F(X*)``, which equals
    ``-crb / 2`` at the exact solution.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
    F = fisher if fisher is not None else fss_fisher(model, delta=delta)
    n = model.n
    B = _selector(n, k_target, block)
    prob = ConstrainedQmpProblem(F.J, B, ConstraintSet.sum_to_zero(n))
    its, flops, status = 0, 0, "converged"
    if solver == "direct":
        X = constrained_crb_oracle(prob)
    else:
        rep = _run_constrained(prob, model, solver, stop)
        X, its, flops, status = rep.X_final, rep.iterations, rep.flops, rep.status
    block_val = B.T @ X
    g = objective(prob, X)
    return RateEvaluation(model.p, float(np.trace(block_val)), block_val, its, flops,
                          F.K_used, g, status)


def _run_constrained(prob, model: FlowModel, solver: str, stop) -> SolveReport:
    stop = stop or stopping_rule("residual_norm", 1e-10, 1_000_000)
    if solver == "cpcg":
        return solve_constrained_pcg(prob, complete_data_preconditioner(model), stop=stop,
                                     rate_iters=0)
    if solver == "cmm-cf":
        return solve_constrained_mm(prob, complete_data_preconditioner(model), stop=stop,
                                    rate_iters=0)
    if solver == "cmm-dd":
        return solve_constrained_mm(prob, diagonally_dominant(prob.J), stop=stop, rate_iters=0)
    if solver == "gp":
        return solve_gradient_projection(prob, complete_data_preconditioner(model), stop=stop)
    if prob.m != 1:
        raise ValueError("the GS composition handles a single target size")
    return gs_two_solve_composition(prob.J, prob.B, prob.H, stop=stop)


@dataclass
class RateDesign:
    p_star: float
    crb_star: float
    status: str
    evaluations: list = field(default_factory=list)
    sweep: list = field(default_factory=list)

    @property
    def sqrt_crb_star(self) -> float:
        return math.sqrt(max(self.crb_star, 0.0))


def optimal_rate(theta, alpha: float, k_target: int = 1, block=None,
                 search_tol: float = 1e-3, p_lo: float = 1e-3, solver: str = "direct",
                 sweep_points: int = 0, delta: float = 1e-8,
                 stop: Optional[StoppingRule] = None) -> RateDesign:
    """Golden-section search for the rate minimizing the constrained CRB.

    Equivalent to maximizing the inner optimum ``g(x*, p) = -crb(p) / 2``.
    Assumes unimodality; if an end point beats the bracketed minimum the
    end point is returned with status ``"non-unimodal"``.
    """
    if not 0 < p_lo < 1:
        raise ValueError("p_lo must lie in (0, 1)")
    if not search_tol > 0:
        raise ValueError("search_tol must be positive")
    theta = np.asarray(theta, dtype=float)
    cache: dict = {}

    def f(p):
        if p not in cache:
            m = FlowModel(theta, alpha, p)
            cache[p] = crb_at_rate(m, k_target, block, solver, stop, delta)
        return cache[p].crb

    def sweep():
        out = []
        if sweep_points:
            for p in np.linspace(p_lo, 1.0, sweep_points):
                f(float(p))
                out.append(cache[float(p)])
        return out

    if theta.size == 1:
        # the sum constraint pins theta_1, so the bound is zero at every rate
        crb1 = f(1.0)
        sw = sweep()
        return RateDesign(1.0, crb1, "degenerate", sorted(cache.values(), key=lambda e: e.p), sw)

    a, b = p_lo, 1.0
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > search_tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    p_star = 0.5 * (a + b)
    crb_star = f(p_star)
    status = "converged"
    for end, touches in ((p_lo, a == p_lo), (1.0, b == 1.0)):
        if f(end) < crb_star:
            # an end inside the final bracket is a boundary optimum, otherwise
            # the bracket missed the minimum
            p_star, crb_star = end, f(end)
            status = "converged" if touches else "non-unimodal"
    sw = sweep()
    evals = sorted(cache.values(), key=lambda e: e.p)
    if status != "converged":
        warnings.warn("CRB(p) is not unimodal on the search interval", stacklevel=2)
    return RateDesign(float(p_star), float(crb_star), status, evals, sw)


@dataclass
class BreakevenRow:
    solver: str
    per_iteration_flops: float
    breakeven_iterations: int
    iterations: Optional[int]
    converged: bool
    within_breakeven: bool


@dataclass
class BreakevenReport:
    n: int
    direct_flops: float
    rows: list


def direct_cost(n: int) -> float:
    """Cholesky ``n^3/3`` plus ``3 n^2`` to form the constrained correction term."""
    return n ** 3 / 3 + 3 * n ** 2


def breakeven_iterations(n: int, per_iteration_flops: float) -> int:
    """Iterations affordable before the direct solve becomes cheaper."""
    return int(math.floor(direct_cost(n) / per_iteration_flops))


def breakeven_report(n: int, solver_reports: dict) -> BreakevenReport:
    """Compare iterative runs against the direct flop count.

    `solver_reports` maps names to a SolveReport (per-iteration cost taken
    from its flop counter) or to a plain per-iteration flop count.
    """
    rows = []
    for name, rep in solver_reports.items():
        if isinstance(rep, SolveReport):
            per = rep.flops / rep.iterations if rep.iterations else float(rep.flops or 1)
            be = breakeven_iterations(n, per)
            within = rep.converged and rep.iterations <= be
            rows.append(BreakevenRow(name, per, be, rep.iterations, rep.converged, within))
        else:
            per = float(rep)
            rows.append(BreakevenRow(name, per, breakeven_iterations(n, per), None, False, False))
    return BreakevenReport(n, direct_cost(n), rows)


def read_distribution(path) -> np.ndarray:
    """Read ``size,proportion`` CSV; sizes must cover 1..n. Renormalizes with a warning."""
    sizes, props = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sizes.append(int(row["size"]))
            props.append(float(row["proportion"]))
    if not sizes:
        raise ValueError(f"{path}: no rows")
    n = max(sizes)
    if sorted(sizes) != list(range(1, n + 1)):
        raise ValueError(f"{path}: sizes must be exactly 1..{n}")
    theta = np.empty(n)
    theta[np.asarray(sizes) - 1] = props
    s = theta.sum()
    if abs(s - 1.0) > 1e-9:
        warnings.warn(f"{path}: proportions sum to {s!r}; renormalizing", stacklevel=2)
    return theta / s


def write_distribution(path, theta) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "proportion"])
        for k, t in enumerate(np.asarray(theta, dtype=float), start=1):
            w.writerow([k, repr(float(t))])
