import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccrb.errors import DimensionMismatch, NotPositiveDefinite
from ccrb.matrix import random_spd
from ccrb.precond import (as_preconditioner, complete_data, dense, diagonal,
                          diagonally_dominant, identity, jacobi_majorizer, majorizes)


def test_identity_scale():
    P = identity(3, 2.0)
    np.testing.assert_array_equal(P.apply_inverse(np.ones(3)), 0.5 * np.ones(3))
    with pytest.raises(NotPositiveDefinite):
        identity(3, 0.0)


def test_diagonal_columns():
    P = diagonal([1.0, 2.0])
    np.testing.assert_array_equal(P.apply_inverse(np.ones((2, 3))), [[1, 1, 1], [.5, .5, .5]])
    np.testing.assert_array_equal(P.apply(np.ones(2)), [1.0, 2.0])


def test_diagonal_rejects_nonpositive():
    with pytest.raises(NotPositiveDefinite):
        diagonal([1.0, 0.0])


def test_dense_inverse():
    a = random_spd(4, 10.0, 1)
    x = np.arange(4.0)
    np.testing.assert_allclose(dense(a).apply_inverse(a @ x), x, atol=1e-12)
    with pytest.raises(NotPositiveDefinite):
        dense(-np.eye(2))


def test_as_preconditioner_dispatch():
    assert as_preconditioner(None, 3).kind == "identity"
    assert as_preconditioner(np.ones(3), 3).kind == "diagonal"
    assert as_preconditioner(np.eye(3), 3).kind == "custom-dense"
    with pytest.raises(DimensionMismatch):
        as_preconditioner(identity(2), 3)


def test_complete_data_kind():
    P = complete_data([0.25, 0.75])
    assert P.kind == "complete-data"
    np.testing.assert_allclose(P.diag, [4.0, 4.0 / 3.0])


@given(st.integers(1, 30), st.floats(1.0, 1e5), st.integers(0, 10 ** 6))
def test_jacobi_majorizes(n, kappa, seed):
    a = random_spd(n, kappa, seed)
    assert majorizes(jacobi_majorizer(a), a)


@given(st.integers(1, 30), st.integers(0, 10 ** 6))
def test_diagonally_dominant_majorizes(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a = a @ a.T + 1e-3 * np.eye(n)
    assert majorizes(diagonally_dominant(a), a)


def test_jacobi_identity_is_tight():
    P = jacobi_majorizer(np.eye(3))
    assert P.diag.max() - 1.0 < 1e-7


def test_majorizes_detects_failure():
    assert not majorizes(identity(2), np.diag([2.0, 1.0]))
