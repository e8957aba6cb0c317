import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccrb.errors import DimensionMismatch, NotPositiveDefinite
from ccrb.matrix import (SymMatrix, direct_solve, iteration_matrix_radius, matvec,
                         power_extremes, pseudoinverse_apply, random_psd, random_spd,
                         read_matrix, write_matrix)
from ccrb.precond import diagonal, identity

from conftest import spd

# 6x6 SPD instance and rho(I - diag(J)^-1 J) from a dense nonsymmetric eigensolver
J6 = np.array([
    [9.977357468274217, 1.3847495376597247, -1.0019189521181293, 0.8699821696424491,
     -0.71095962139127, -1.4489776864189097],
    [1.3847495376597247, 12.761552605538213, 0.5677989545379072, 2.7054461379365264,
     -1.5349890855170383, 0.4101827259597091],
    [-1.0019189521181293, 0.5677989545379072, 7.560592851413335, -0.10749976518093336,
     -2.808681576051117, 1.7546295209902338],
    [0.8699821696424491, 2.7054461379365264, -0.10749976518093336, 10.150045626425914,
     1.335077102223351, 0.2516799347594204],
    [-0.71095962139127, -1.5349890855170383, -2.808681576051117, 1.335077102223351,
     14.22156175466642, -2.726354298077475],
    [-1.4489776864189097, 0.4101827259597091, 1.7546295209902338, 0.2516799347594204,
     -2.726354298077475, 8.16499564467539]])
J6_JACOBI_RADIUS = 0.5458322064417862


class TestSymMatrix:
    def test_exact_symmetry(self, rng):
        A = SymMatrix(rng.standard_normal((7, 7)))
        assert np.array_equal(A.data, A.data.T)

    def test_readonly(self):
        A = SymMatrix(np.eye(2))
        with pytest.raises(ValueError):
            A.data[0, 0] = 3.0

    def test_rejects_nonsquare_and_empty(self):
        with pytest.raises(DimensionMismatch):
            SymMatrix(np.ones((2, 3)))
        with pytest.raises(DimensionMismatch):
            SymMatrix(np.ones((0, 0)))

    def test_strict_mode(self):
        with pytest.raises(ValueError):
            SymMatrix([[1.0, 2.0], [0.0, 1.0]], symmetrize=False)

    def test_flop_counter_threads(self):
        A = SymMatrix(np.eye(3))

        def work():
            for _ in range(1000):
                A.add_flops(1)

        ts = [threading.Thread(target=work) for _ in range(8)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert A.flops == 8000


class TestMatvec:
    def test_identity(self):
        assert np.array_equal(matvec(np.eye(3), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_diagonal(self):
        assert np.array_equal(matvec(np.diag([2.0, 3.0]), [1.0, 1.0]), [2.0, 3.0])

    def test_double_loop_oracle(self, rng):
        a = spd(5, 10.0, 1)
        x = rng.standard_normal(5)
        ref = [sum(a[i, j] * x[j] for j in range(5)) for i in range(5)]
        np.testing.assert_allclose(matvec(a, x), ref, rtol=1e-14)

    def test_flops(self):
        A = SymMatrix(np.eye(4))
        matvec(A, np.ones((4, 3)))
        assert A.flops == 2 * 16 * 3

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            matvec(np.eye(3), np.ones(4))


class TestDirectSolve:
    def test_unit_vector(self):
        np.testing.assert_array_equal(direct_solve(np.eye(4), np.eye(4)[:, 1]), np.eye(4)[:, 1])

    def test_scalar(self):
        assert direct_solve([[4.0]], [2.0])[0] == 0.5

    def test_inverse_residual(self):
        a = spd(6, 1e3, 2)
        X = direct_solve(a, np.eye(6))
        assert np.linalg.norm(a @ X - np.eye(6)) < 1e-10

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefinite):
            direct_solve(np.diag([1.0, -1.0]), np.ones(2))

    def test_flop_convention(self):
        n = 9
        A = SymMatrix(spd(n, 10.0, 3))
        direct_solve(A, np.eye(n))
        assert A.flops == n ** 3 // 3 + 2 * n ** 3

    def test_factorization_cached(self):
        n = 5
        A = SymMatrix(spd(n, 10.0, 3))
        direct_solve(A, np.ones(n))
        direct_solve(A, np.ones(n))
        assert A.flops == n ** 3 // 3 + 2 * (2 * n * n)

    @given(st.integers(1, 50), st.floats(1.0, 1e6), st.integers(0, 10 ** 6))
    def test_residual_property(self, n, kappa, seed):
        a = random_spd(n, kappa, seed)
        B = np.random.default_rng(seed).standard_normal((n, 2))
        X = direct_solve(a, B)
        assert np.linalg.norm(a @ X - B) <= 1e-10 * np.linalg.norm(B) * max(1.0, kappa / 1e4)


class TestPseudoinverse:
    def test_rank_one_diagonal(self):
        np.testing.assert_array_equal(pseudoinverse_apply(np.diag([2.0, 0.0]), [4.0, 0.0]),
                                      [2.0, 0.0])

    def test_identity(self, rng):
        B = rng.standard_normal((3, 2))
        np.testing.assert_allclose(pseudoinverse_apply(np.eye(3), B), B, rtol=1e-14)

    def test_range_and_null_space(self):
        a = random_psd(5, 3, 4)
        b = a @ np.arange(1.0, 6.0)
        x = pseudoinverse_apply(a, b)
        np.testing.assert_allclose(a @ x, b, atol=1e-10)
        w, V = np.linalg.eigh(a)
        null = V[:, np.abs(w) < 1e-10]
        assert null.shape[1] == 2
        assert np.abs(null.T @ x).max() < 1e-10

    @given(st.integers(1, 20), st.data())
    def test_moore_penrose_conditions(self, n, data):
        r = data.draw(st.integers(0, n))
        seed = data.draw(st.integers(0, 10 ** 6))
        a = random_psd(n, r, seed)
        Ap = pseudoinverse_apply(a, np.eye(n))
        tol = 1e-8 * max(1.0, np.abs(a).max())
        assert np.abs(a @ Ap @ a - a).max() < tol
        assert np.abs(Ap @ a @ Ap - Ap).max() < 1e-8 * max(1.0, np.abs(Ap).max())
        assert np.abs((a @ Ap) - (a @ Ap).T).max() < 1e-8
        assert np.abs((Ap @ a) - (Ap @ a).T).max() < 1e-8


class TestPowerExtremes:
    def test_diagonal(self):
        s = power_extremes(np.diag([3.0, 1.0]))
        assert s.lambda_max == pytest.approx(3.0, rel=1e-9)
        assert s.lambda_min == pytest.approx(1.0, rel=1e-9)
        assert s.condition_estimate == pytest.approx(3.0, rel=1e-9)

    def test_identity(self):
        s = power_extremes(np.eye(4))
        assert s.lambda_max == pytest.approx(1.0) and s.lambda_min == pytest.approx(1.0)
        assert s.converged

    def test_random_symmetric_against_eigh(self, rng):
        a = rng.standard_normal((8, 8))
        a = a + a.T
        w = np.linalg.eigvalsh(a)
        s = power_extremes(a, iters=20000, tol=1e-12)
        assert s.lambda_max == pytest.approx(w[-1], rel=1e-6)
        assert s.lambda_min == pytest.approx(w[0], rel=1e-6)
        assert s.spectral_radius == pytest.approx(np.abs(w).max(), rel=1e-6)

    def test_nonconvergence_is_flagged(self):
        # equal-magnitude, opposite-sign ends never settle
        s = power_extremes(np.diag([1.0, -1.0, 0.5]), iters=10)
        assert not s.converged

    def test_deterministic(self):
        a = spd(10, 50.0, 1)
        assert power_extremes(a) == power_extremes(a)

    @given(st.integers(2, 12), st.integers(0, 10 ** 6))
    def test_gap_property(self, n, seed):
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        w = np.sort(rng.uniform(-1.0, 1.0, n))
        w[-1] = 2.0  # gap >= 1e-3 * lambda_1
        a = (Q * w) @ Q.T
        s = power_extremes(a, iters=20000)
        assert abs(s.lambda_max - 2.0) <= 1e-8 * 2.0


class TestIterationRadius:
    def test_exact_preconditioner(self):
        a = spd(5, 10.0, 0)
        from ccrb.precond import dense
        assert iteration_matrix_radius(dense(a), a) < 1e-12

    def test_scalar_algebra(self):
        assert iteration_matrix_radius(identity(3, 2.0), np.eye(3)) == pytest.approx(0.5)

    def test_jacobi_dense_oracle(self):
        r = iteration_matrix_radius(diagonal(np.diag(J6)), J6)
        assert r == pytest.approx(J6_JACOBI_RADIUS, rel=1e-6)


class TestMatrixIO:
    def test_roundtrip(self, tmp_path, rng):
        a = rng.standard_normal((3, 2))
        write_matrix(tmp_path / "a.txt", a)
        assert np.array_equal(read_matrix(tmp_path / "a.txt"), a)
        assert (tmp_path / "a.txt").read_text().splitlines()[0] == "3 2"

    def test_bad_header(self, tmp_path):
        (tmp_path / "b.txt").write_text("x\n1\n")
        with pytest.raises(ValueError):
            read_matrix(tmp_path / "b.txt")

    def test_row_count(self, tmp_path):
        (tmp_path / "c.txt").write_text("2 2\n1 0\n")
        with pytest.raises(ValueError):
            read_matrix(tmp_path / "c.txt")

    def test_from_file(self, tmp_path):
        write_matrix(tmp_path / "d.txt", np.eye(2))
        assert SymMatrix.from_file(tmp_path / "d.txt").n == 2


def test_random_spd_condition():
    a = random_spd(20, 1e4, 5)
    w = np.linalg.eigvalsh(a)
    assert w[-1] / w[0] == pytest.approx(1e4, rel=1e-8)


def test_random_psd_rank():
    a = random_psd(10, 7, 5)
    assert np.linalg.matrix_rank(a, tol=1e-9) == 7
