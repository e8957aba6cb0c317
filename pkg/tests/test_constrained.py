import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccrb.constrained import (ConstrainedQmpProblem, ConstraintSet, Projector, null_basis,
                              constrained_crb_oracle, constrained_crb_via_inverse,
                              constrained_fisher_bound, gs_two_solve_composition,
                              projection_operator, solve_constrained_mm,
                              solve_constrained_pcg, solve_gradient_projection)
from ccrb.errors import (InfeasibleStart, RankDeficientConstraints, SingularReducedFisher)
from ccrb.matrix import random_psd, random_spd
from ccrb.precond import diagonal, diagonally_dominant, jacobi_majorizer
from ccrb.solvers import QmpProblem, solve_mm, stopping_rule

STOP = stopping_rule("residual_norm", 1e-12, 500_000)


def _instance(n, p, seed, kappa=100.0):
    rng = np.random.default_rng(seed)
    return random_spd(n, kappa, seed), rng.standard_normal((n, 2)), rng.standard_normal((n, p))


class TestNullBasis:
    def test_sum_to_zero_2d(self):
        U = null_basis(np.ones((2, 1))).U
        assert U.shape == (2, 1)
        np.testing.assert_allclose(np.abs(U[:, 0]), [1 / math.sqrt(2)] * 2, rtol=1e-14)

    @given(st.integers(1, 30), st.data())
    def test_orthonormal_and_null(self, n, data):
        p = data.draw(st.integers(0, n))
        H = np.random.default_rng(data.draw(st.integers(0, 10 ** 6))).standard_normal((n, p))
        U = null_basis(H).U
        assert U.shape == (n, n - p)
        np.testing.assert_allclose(U.T @ U, np.eye(n - p), atol=1e-12)
        assert np.abs(H.T @ U).max(initial=0.0) < 1e-10 * max(1.0, np.abs(H).max(initial=1.0))

    def test_rank_deficient(self):
        with pytest.raises(RankDeficientConstraints):
            ConstraintSet(np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]))
        with pytest.raises(RankDeficientConstraints):
            ConstraintSet(np.ones((2, 3)))

    def test_implicit_matches_dense(self):
        H = np.random.default_rng(3).standard_normal((7, 2))
        b = null_basis(H)
        Y = np.arange(10.0).reshape(5, 2)
        np.testing.assert_allclose(b.apply(Y), b.U @ Y, atol=1e-13)
        np.testing.assert_allclose(b.apply_t(np.ones((7, 1))), b.U.T @ np.ones((7, 1)), atol=1e-13)


class TestOracle:
    def test_two_by_two_identity(self):
        # identity Fisher with theta_1 + theta_2 = const: bound on theta_1 is 1/2
        prob = ConstrainedQmpProblem(np.eye(2), [[1.0], [0.0]], "sum-to-zero")
        np.testing.assert_allclose(constrained_crb_oracle(prob)[:, 0], [0.5, -0.5], atol=1e-15)

    def test_no_constraints_is_inverse(self):
        J = random_spd(5, 10.0, 1)
        X = constrained_crb_oracle(ConstrainedQmpProblem(J, np.eye(5), ConstraintSet.none(5)))
        np.testing.assert_allclose(X, np.linalg.inv(J), atol=1e-12)

    def test_full_constraints_zero(self):
        X = constrained_crb_oracle(ConstrainedQmpProblem(np.eye(2), np.eye(2), np.eye(2)))
        assert not X.any()

    @given(st.integers(2, 50), st.data())
    def test_identity_with_inverse_form(self, n, data):
        p = data.draw(st.integers(1, min(5, n - 1)))
        J, B, H = _instance(n, p, data.draw(st.integers(0, 10 ** 6)))
        X1 = constrained_crb_oracle(ConstrainedQmpProblem(J, B, H))
        X2 = constrained_crb_via_inverse(J, B, H)
        assert np.linalg.norm(X1 - X2) <= 1e-9 * np.linalg.norm(X2)

    def test_singular_J_regular_on_nullspace(self):
        # J = diag(1, 0) is singular but regular on {x1 + x2 = 0}
        X = constrained_fisher_bound(np.diag([1.0, 0.0]), np.ones((2, 1)))
        np.testing.assert_allclose(X, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-14)

    def test_singular_reduced(self):
        prob = ConstrainedQmpProblem(np.diag([1.0, 0.0, 0.0]), np.eye(3), [[1.0], [0.0], [0.0]])
        with pytest.raises(SingularReducedFisher):
            constrained_crb_oracle(prob)

    def test_kkt_conditions(self):
        J, B, H = _instance(10, 3, 9)
        X = constrained_crb_oracle(ConstrainedQmpProblem(J, B, H))
        assert np.abs(H.T @ X).max() < 1e-12
        # J X - B lies in range(H)
        R = J @ X - B
        lam = np.linalg.lstsq(H, R, rcond=None)[0]
        np.testing.assert_allclose(H @ lam, R, atol=1e-10)


class TestProjector:
    @given(st.integers(2, 20), st.integers(0, 10 ** 6))
    def test_idempotent_and_feasible(self, n, seed):
        rng = np.random.default_rng(seed)
        H = rng.standard_normal((n, 1 + seed % (n - 1)))
        P = diagonal(rng.uniform(0.5, 5.0, n))
        T = Projector(H, P).dense()
        np.testing.assert_allclose(T @ T, T, atol=1e-9 * max(1.0, np.abs(T).max()))
        assert np.abs(H.T @ T).max() < 1e-9 * max(1.0, np.abs(H).max() * np.abs(T).max())
        TP = T @ np.diag(1.0 / P.diag)
        np.testing.assert_allclose(TP, TP.T, atol=1e-10)

    def test_euclidean_case(self):
        T = projection_operator(np.ones((2, 1)))
        np.testing.assert_allclose(T, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)


class TestConstrainedMM:
    def test_converges_to_oracle(self):
        J, B, H = _instance(15, 2, 11)
        prob = ConstrainedQmpProblem(J, B, H)
        r = solve_constrained_mm(prob, jacobi_majorizer(J), stop=STOP)
        assert r.converged
        np.testing.assert_allclose(r.X_final, constrained_crb_oracle(prob), atol=1e-9)

    @given(st.integers(2, 25), st.integers(0, 10 ** 6))
    def test_monotone_and_feasible(self, n, seed):
        J, B, H = _instance(n, 1, seed, kappa=50.0)
        prob = ConstrainedQmpProblem(J, B, H)
        r = solve_constrained_mm(prob, diagonally_dominant(J),
                                 stop=stopping_rule("residual_norm", 1e-8, 5000), rate_iters=0)
        scale = max(1.0, abs(r.objective_trajectory[-1]))
        assert np.all(np.diff(r.objective_trajectory) <= 1e-12 * scale)
        assert np.abs(H.T @ r.X_final).max() < 1e-10 * max(1.0, np.abs(r.X_final).max())

    def test_no_constraints_bitwise_unconstrained(self):
        J = random_spd(6, 20.0, 2)
        b = np.ones(6)
        P = jacobi_majorizer(J)
        stop = stopping_rule(max_iters=40)
        a = solve_constrained_mm(ConstrainedQmpProblem(J, b, ConstraintSet.none(6)), P,
                                 stop=stop, rate_iters=0)
        # unconstrained MM tracks the same iterates; compare a recomputed run
        x = np.zeros((6, 1))
        for _ in range(40):
            x = x + P.apply_inverse(b[:, None] - J @ x)
        assert np.array_equal(a.X_final, x)
        u = solve_mm(QmpProblem(J, b), P, stop=stop, rate_iters=0)
        np.testing.assert_allclose(u.X_final, x, rtol=1e-12)

    def test_infeasible_start(self):
        prob = ConstrainedQmpProblem(np.eye(2), [1.0, 0.0], "sum-to-zero")
        with pytest.raises(InfeasibleStart):
            solve_constrained_mm(prob, x0=[1.0, 0.0])
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            r = solve_constrained_mm(prob, np.ones(2), x0=[1.0, 0.0], project_x0=True,
                                     stop=STOP)
        assert w
        np.testing.assert_allclose(r.x, [0.5, -0.5], atol=1e-12)

    def test_rate_predicted_with_projection(self):
        prob = ConstrainedQmpProblem(np.diag([1.0, 3.0]), [1.0, 0.0], "sum-to-zero")
        r = solve_constrained_mm(prob, np.full(2, 3.0), stop=STOP)
        # on the feasible line the step contracts by 1 - 4/6
        assert r.rho_predicted == pytest.approx(1.0 / 3.0, rel=1e-6)


class TestConstrainedPCG:
    @pytest.mark.parametrize("variant", ["reduced", "projected"])
    def test_converges(self, variant):
        J, B, H = _instance(30, 3, 12, kappa=1e3)
        prob = ConstrainedQmpProblem(J, B, H)
        r = solve_constrained_pcg(prob, np.diag(J).copy(), stop=STOP, variant=variant)
        assert r.converged and r.iterations <= 60
        np.testing.assert_allclose(r.X_final, constrained_crb_oracle(prob), atol=1e-8)

    def test_feasible(self):
        J, B, H = _instance(10, 2, 13)
        r = solve_constrained_pcg(ConstrainedQmpProblem(J, B, H), stop=STOP)
        assert np.abs(H.T @ r.X_final).max() < 1e-10

    def test_psd_fisher(self):
        # rank-deficient J is fine when U^T J U is nonsingular
        J = random_psd(6, 5, 1) + 0.0
        w, V = np.linalg.eigh(J)
        H = V[:, :1]
        prob = ConstrainedQmpProblem(J, np.eye(6)[:, :1], H)
        r = solve_constrained_pcg(prob, stop=STOP)
        np.testing.assert_allclose(r.X_final, constrained_crb_oracle(prob), atol=1e-8)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            solve_constrained_pcg(ConstrainedQmpProblem(np.eye(2), [1.0, 0.0], "sum-to-zero"),
                                  variant="dense")


def test_gradient_projection():
    J, B, H = _instance(8, 1, 14, kappa=10.0)
    prob = ConstrainedQmpProblem(J, B, H)
    r = solve_gradient_projection(prob, stop=STOP)
    np.testing.assert_allclose(r.X_final, constrained_crb_oracle(prob), atol=1e-9)


def test_gs_composition():
    J = random_spd(10, 30.0, 15)
    b = np.eye(10)[:, :1]
    r = gs_two_solve_composition(J, b, stop=STOP)
    prob = ConstrainedQmpProblem(J, b, "sum-to-zero")
    np.testing.assert_allclose(r.X_final, constrained_crb_oracle(prob), atol=1e-9)
    assert abs(r.bound_trajectory[-1] - (b.T @ constrained_crb_oracle(prob))[0, 0]) < 1e-9
