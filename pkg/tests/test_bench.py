import numpy as np
import pytest

from ccrb.bench import (TABLE_COLUMNS, constrained_instance, reference_bound,
                        run_bench, unconstrained_instance)
from ccrb.fss import FlowModel, fss_fisher, zipf_distribution
from ccrb.matrix import random_spd
from ccrb.solvers import selector


@pytest.fixture(scope="module")
def fss_small():
    th = zipf_distribution(20)
    F = fss_fisher(FlowModel(th, 4.0, 0.25))
    return constrained_instance(F.J, selector(20, 0), "sum-to-zero", th, "fss20")


def test_unconstrained_table():
    J = random_spd(15, 100.0, 1)
    res = run_bench(unconstrained_instance(J, selector(15, 0)), rate_iters=200)
    assert [r.solver for r in res.rows] == ["mm", "richardson", "gauss_seidel", "steepest",
                                           "cg", "pcg"]
    assert res.reference == pytest.approx(np.linalg.inv(J)[0, 0], rel=1e-12)
    for r in res.rows:
        assert r.status == "converged"
        assert r.iters_5pct <= r.iters_0p5pct <= r.iters_converge
        assert abs(res.reports[r.solver].bound_trajectory[-1] - res.reference) <= 1e-6


def test_constrained_defaults(fss_small):
    res = run_bench(fss_small)
    assert [r.solver for r in res.rows] == ["cpcg", "cmm-cf", "cmm-dd", "gp", "gs"]
    assert res.row("cpcg").iters_converge < res.row("cmm-cf").iters_converge
    # constrained MM approaches the bound from below, monotonically
    traj = res.reports["cmm-cf"].bound_trajectory
    assert np.all(np.diff(traj) >= -1e-12 * abs(res.reference))


def test_csv_layout(fss_small):
    res = run_bench(fss_small, ["cpcg", "gp"], max_iters=5)
    lines = res.to_csv().splitlines()
    assert lines[0] == ",".join(TABLE_COLUMNS)
    gp = lines[2].split(",")
    assert gp[0] == "gp" and gp[1] == "nan" and gp[4] == "max_iters"


def test_errors_become_rows():
    # J is singular but regular on the nullspace of H = e_3; Gauss-Seidel needs a positive diagonal
    J = np.diag([2.0, 1.0, 0.0])
    inst = constrained_instance(J, selector(3, 0), np.eye(3)[:, 2:])
    assert reference_bound(inst) == pytest.approx(0.5)
    res = run_bench(inst, ["gs", "cpcg"], rate_iters=0)
    # the zero diagonal breaks both solvers; each failure is a row, the table completes
    assert [r.solver for r in res.rows] == ["gs", "cpcg"]
    for r in res.rows:
        assert r.status == "error:NotPositiveDefinite" and r.cells()[4] == r.status


def test_unknown_solver_is_value_error():
    with pytest.raises(ValueError):
        run_bench(unconstrained_instance(np.eye(2), np.ones(2)), ["nope"])


def test_deterministic(fss_small):
    a = run_bench(fss_small, seed=3).to_csv()
    b = run_bench(fss_small, seed=3).to_csv()
    assert a == b
