"""Dense symmetric kernels, direct reference solves and spectral estimates.

Flop accounting convention
--------------------------
* matrix-vector product with an n x n matrix: ``2 n^2`` per right-hand column
* Cholesky factorization: ``n^3 // 3``
* two triangular solves: ``2 n^2`` per right-hand column

Counters are Python integers so breakeven arithmetic stays exact.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, NotPositiveDefinite

DEFAULT_SEED = 0


class SymMatrix:
    """Immutable dense symmetric matrix with a thread-safe flop counter.

    The input is symmetrized as ``(A + A.T) / 2`` on construction, which
    gives bitwise symmetry because floating point addition commutes.

    Parameters
    ----------
    data : array_like, shape (n, n)
    symmetrize : bool
        If False the input must already be exactly symmetric.
    """

    def __init__(self, data, symmetrize: bool = True):
        a = np.array(data, dtype=float, copy=True)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
        if a.shape[0] < 1:
            raise DimensionMismatch("matrix must have n >= 1")
        if symmetrize:
            a = 0.5 * (a + a.T)
        elif not np.array_equal(a, a.T):
            raise ValueError("matrix is not exactly symmetric")
        a.setflags(write=False)
        self._data = a
        self._flops = 0
        self._lock = threading.Lock()
        self._chol = None

    @property
    def n(self) -> int:
        return self._data.shape[0]

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def flops(self) -> int:
        return self._flops

    def add_flops(self, count: int) -> None:
        with self._lock:
            self._flops += int(count)

    def reset_flops(self) -> None:
        with self._lock:
            self._flops = 0

    def __repr__(self):
        return f"SymMatrix(n={self.n}, flops={self._flops})"

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def _cholesky(self):
        # cached: the matrix is immutable
        if self._chol is None:
            try:
                c = sla.cho_factor(self._data, lower=True, check_finite=True)
            except sla.LinAlgError as exc:
                raise NotPositiveDefinite(str(exc)) from exc
            self._chol = c
            self.add_flops(self.n ** 3 // 3)
        return self._chol

    @classmethod
    def from_file(cls, path) -> "SymMatrix":
        return cls(read_matrix(path))


def as_sym(A) -> SymMatrix:
    return A if isinstance(A, SymMatrix) else SymMatrix(A)


@dataclass(frozen=True)
class SpectralSummary:
    lambda_max: float
    lambda_min: float
    spectral_radius: float
    condition_estimate: float
    converged: bool = True
    iterations: int = 0


def _as_columns(A: SymMatrix, B) -> tuple[np.ndarray, bool]:
    b = np.asarray(B, dtype=float)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if b.ndim != 2 or b.shape[0] != A.n:
        raise DimensionMismatch(f"operand of shape {np.shape(B)} does not match n={A.n}")
    return b, vector


def matvec(A, x) -> np.ndarray:
    """Return ``A @ x`` and charge ``2 n^2`` flops per column of `x`."""
    A = as_sym(A)
    xs, _ = _as_columns(A, x)
    A.add_flops(2 * A.n * A.n * xs.shape[1])
    return A.data @ np.asarray(x, dtype=float)


def direct_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` by Cholesky.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is not positive.
    """
    A = as_sym(A)
    b, vector = _as_columns(A, B)
    c = A._cholesky()
    X = sla.cho_solve(c, b)
    A.add_flops(2 * A.n * A.n * b.shape[1])
    return X[:, 0] if vector else X


def pseudoinverse_apply(A, B, rank_tol: float = 1e-12) -> np.ndarray:
    """Apply the Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues with magnitude at or below ``rank_tol * max|lambda|`` are
    treated as zero.
    """
    A = as_sym(A)
    b, vector = _as_columns(A, B)
    w, V = np.linalg.eigh(A.data)
    scale = np.max(np.abs(w))
    keep = np.abs(w) > rank_tol * scale if scale > 0 else np.zeros_like(w, dtype=bool)
    Vk = V[:, keep]
    X = Vk @ ((Vk.T @ b) / w[keep][:, None])
    return X[:, 0] if vector else X


def _power_dominant(apply: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                    iters: int, tol: float,
                    inner: Callable[[np.ndarray, np.ndarray], float] = np.dot):
    """Dominant eigenpair of an operator self-adjoint under `inner`.

    Returns the signed Rayleigh quotient, the last iterate, a convergence
    flag and the number of iterations. Convergence is declared when the
    eigen-residual ``||A x - lambda x||`` falls below ``tol * |lambda|``.
    """
    x = x0 / np.sqrt(inner(x0, x0))
    lam = 0.0
    for it in range(1, iters + 1):
        y = apply(x)
        lam = inner(x, y)
        res = y - lam * x
        ynorm = np.sqrt(inner(y, y))
        if ynorm == 0.0:
            return 0.0, x, True, it
        if np.sqrt(max(inner(res, res), 0.0)) <= tol * abs(lam):
            return lam, x, True, it
        x = y / ynorm
    return lam, x, False, iters


def _start_vector(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def power_extremes(A, iters: int = 5000, tol: float = 1e-10,
                   seed: int = DEFAULT_SEED) -> SpectralSummary:
    """Estimate the extreme eigenvalues of a symmetric matrix.

    The dominant eigenvalue is found by power iteration; the opposite end
    of the spectrum by power iteration on the shifted matrix. Failure to
    converge within `iters` is reported in the summary, not raised.
    """
    A = as_sym(A)
    n = A.n
    a = A.data
    x0 = _start_vector(n, seed)
    count = 0

    def op(x):
        nonlocal count
        count += 1
        return a @ x

    dom, _, ok1, it1 = _power_dominant(op, x0, iters, tol)
    if dom >= 0:
        lmax = dom
        mu, _, ok2, it2 = _power_dominant(lambda x: lmax * x - op(x), x0, iters, tol)
        lmin = lmax - mu
    else:
        lmin = dom
        mu, _, ok2, it2 = _power_dominant(lambda x: op(x) - lmin * x, x0, iters, tol)
        lmax = lmin + mu
    A.add_flops(2 * n * n * count)
    radius = max(abs(lmax), abs(lmin))
    cond = lmax / lmin if lmin > 0 else np.inf
    return SpectralSummary(lmax, lmin, radius, cond, ok1 and ok2, it1 + it2)


def iteration_matrix_radius(P, J, iters: int = 5000, tol: float = 1e-10,
                            seed: int = DEFAULT_SEED,
                            project: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """Spectral radius of the splitting operator ``x -> x - P^{-1} J x``.

    The operator is self-adjoint in the inner product ``<x, y>_P = x^T P y``,
    so the norm ratio ``||A x||_P / ||x||_P`` converges to the radius even
    when eigenvalues of opposite sign share the largest magnitude.

    `project`, if given, maps onto an invariant subspace (used for the
    constrained recursion, whose operator is applied as ``project(A x)``).
    """
    from .precond import as_preconditioner

    J = as_sym(J)
    P = as_preconditioner(P, J.n)
    x = _start_vector(J.n, seed)

    def op(v):
        w = v - P.apply_inverse(J.data @ v)
        return project(w) if project is not None else w

    if project is not None:
        x = project(x)

    def pnorm2(v):
        return float(v @ P.apply(v))

    nx = np.sqrt(pnorm2(x))
    if nx == 0.0:
        return 0.0
    x = x / nx
    rho_prev = np.inf
    rho = 0.0
    count = 0
    for _ in range(iters):
        count += 1
        y = op(x)
        # Rayleigh quotient of A^2 in the P-metric
        rho = np.sqrt(pnorm2(y))
        if rho == 0.0:
            break
        if abs(rho - rho_prev) <= tol * rho:
            break
        rho_prev = rho
        x = y / rho
    J.add_flops(2 * J.n * J.n * count)
    return float(rho)


def random_spd(n: int, kappa: float, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Random SPD matrix with condition number `kappa`.

    Eigenvalues are log-uniform on ``[1, kappa]`` with both ends pinned,
    eigenvectors from the QR factor of a Gaussian matrix.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.exp(rng.uniform(0.0, np.log(kappa), n))
    w[0] = 1.0
    if n > 1:
        w[-1] = kappa
    A = (Q * w) @ Q.T
    return 0.5 * (A + A.T)


def random_psd(n: int, rank: int, seed: int = DEFAULT_SEED, kappa: float = 100.0) -> np.ndarray:
    """Random PSD matrix of exact rank `rank` with nonzero spectrum in ``[1, kappa]``."""
    if not 0 <= rank <= n:
        raise ValueError("rank must lie in [0, n]")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.zeros(n)
    w[:rank] = np.exp(rng.uniform(0.0, np.log(kappa), rank))
    A = (Q * w) @ Q.T
    return 0.5 * (A + A.T)


def read_matrix(path) -> np.ndarray:
    """Read the plain-text matrix format: ``n m`` header then n rows of m values."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty matrix file")
    try:
        n, m = (int(t) for t in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"{path}: header must be 'n m'") from exc
    rows = lines[1:]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} rows, found {len(rows)}")
    out = np.empty((n, m))
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != m:
            raise ValueError(f"{path}: row {i + 1} has {len(vals)} values, expected {m}")
        out[i] = [float(v) for v in vals]
    return out


def write_matrix(path, A) -> None:
    a = np.atleast_2d(np.asarray(A, dtype=float))
    if np.ndim(A) == 1:
        a = a.T
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")
