"""Positive-definite preconditioners with cheap inverse application."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatch, NotPositiveDefinite
from .matrix import SymMatrix, as_sym, power_extremes

KINDS = ("identity", "diagonal", "complete-data", "custom-dense")


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """A symmetric positive-definite operator ``P``.

    Diagonal kinds store the diagonal; ``custom-dense`` stores the matrix and
    its Cholesky factor. `label` is a free-form name used in reports
    (e.g. ``"CMM-DD"``).
    """

    kind: str
    n: int
    diag: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None
    label: str = ""
    _chol: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        if self.dense is None:
            d = self.diag if x.ndim == 1 else self.diag[:, None]
            return x / d
        return sla.cho_solve(self._chol, x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.dense is None:
            d = self.diag if x.ndim == 1 else self.diag[:, None]
            return x * d
        return self.dense @ x

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) if self.dense is None else np.array(self.dense)

    @property
    def inverse_flops(self) -> int:
        """Flops of one ``apply_inverse`` on a vector."""
        return self.n if self.dense is None else 2 * self.n * self.n


def identity(n: int, scale: float = 1.0) -> Preconditioner:
    if scale <= 0:
        raise NotPositiveDefinite("identity scale must be positive")
    return Preconditioner("identity", n, diag=np.full(n, float(scale)), label="identity")


def diagonal(d, label: str = "diagonal", kind: str = "diagonal") -> Preconditioner:
    d = np.asarray(d, dtype=float)
    if d.ndim != 1:
        raise DimensionMismatch("diagonal preconditioner needs a vector")
    if not np.all(d > 0):
        raise NotPositiveDefinite("diagonal preconditioner must be strictly positive")
    d = d.copy()
    d.setflags(write=False)
    return Preconditioner(kind, d.size, diag=d, label=label)


def dense(P, label: str = "dense") -> Preconditioner:
    P = as_sym(P).data
    try:
        c = sla.cho_factor(P, lower=True)
    except sla.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return Preconditioner("custom-dense", P.shape[0], dense=P, label=label, _chol=c)


def jacobi_majorizer(J, margin: Optional[float] = None, seed: int = 0) -> Preconditioner:
    """``s * diag(J)`` scaled so that ``P - J`` is PSD.

    ``s`` is ``(1 + margin)`` times the power-iteration estimate of the
    largest eigenvalue of ``D^{-1/2} J D^{-1/2}``. By default the margin is
    ``1e-8`` when the power iteration met its residual test (the estimate
    is then within ``1e-10`` of an eigenvalue) and ``0.01`` otherwise.
    """
    J = as_sym(J)
    d = np.diag(J.data).copy()
    if not np.all(d > 0):
        raise NotPositiveDefinite("Jacobi preconditioner needs a positive diagonal")
    s = 1.0 / np.sqrt(d)
    est = power_extremes(SymMatrix(J.data * s[:, None] * s[None, :]), seed=seed)
    if margin is None:
        margin = 1e-8 if est.converged else 0.01
    return diagonal(d * max(est.lambda_max, 1.0) * (1.0 + margin), label="jacobi")


def diagonally_dominant(J) -> Preconditioner:
    """Diagonal of absolute row sums: the first-order diagonally dominant majorizer.

    ``P - J`` is symmetric with nonnegative diagonal equal to the
    off-diagonal absolute row sum, hence diagonally dominant and PSD.
    """
    J = as_sym(J)
    return diagonal(np.abs(J.data).sum(axis=1), label="diag-dominant")


def complete_data(theta, scale: float = 1.0) -> Preconditioner:
    """``scale * diag(1 / theta)``: Fisher information of the complete data."""
    theta = np.asarray(theta, dtype=float)
    return diagonal(scale / theta, label="complete-data", kind="complete-data")


def as_preconditioner(P, n: int) -> Preconditioner:
    if isinstance(P, Preconditioner):
        if P.n != n:
            raise DimensionMismatch(f"preconditioner size {P.n} != {n}")
        return P
    if P is None:
        return identity(n)
    a = np.asarray(P, dtype=float)
    if a.ndim == 1:
        return diagonal(a)
    if isinstance(P, SymMatrix):
        a = P.data
    return dense(a)


def majorizes(P: Preconditioner, J, rel_slack: float = 1e-10) -> bool:
    """Check ``P - J >= 0`` up to ``rel_slack * lambda_max(P)``."""
    J = as_sym(J)
    Pd = P.to_dense()
    w = np.linalg.eigvalsh(Pd - J.data)
    return bool(w[0] >= -rel_slack * np.max(np.abs(np.linalg.eigvalsh(Pd))))
