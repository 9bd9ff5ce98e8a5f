import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netctl.errors import InfeasibleError, ParameterError, ShapeError
from netctl.qp import QpProblem, kkt_residuals, solve_qp
from oracles import qp_enumerate, random_box_budget_qp


def test_interior_optimum():
    x, d = solve_qp(QpProblem(np.eye(3), np.zeros(3), lb=-np.ones(3), ub=np.ones(3)))
    np.testing.assert_allclose(x, 0.0, atol=1e-8)
    assert d.status == "optimal" and d.kkt <= 1e-6


def test_active_general_row():
    x, d = solve_qp(QpProblem(np.eye(1), -np.ones(1), G=np.ones((1, 1)), h=np.array([0.5])))
    np.testing.assert_allclose(x, [0.5], atol=1e-8)
    assert d.z_ineq[0] == pytest.approx(0.5, abs=1e-7)


def test_zero_objective_any_box_point():
    x, d = solve_qp(QpProblem(np.zeros((4, 4)), np.zeros(4), lb=np.zeros(4), ub=np.ones(4)))
    assert np.all((x >= -1e-9) & (x <= 1 + 1e-9))
    assert d.status == "optimal"


def test_linear_program_vertex():
    # maximize sum of weighted entries under a budget: greedy by weight
    w = np.array([3.0, 1.0, 2.0, 0.5])
    x, d = solve_qp(QpProblem(np.zeros((4, 4)), -w, G=np.ones((1, 4)), h=np.array([2.0]),
                              lb=np.zeros(4), ub=np.ones(4)))
    np.testing.assert_allclose(x, [1, 0, 1, 0], atol=1e-7)
    assert d.kkt <= 1e-6


def test_equality_constraints():
    H = np.diag([1.0, 2.0, 3.0])
    qp = QpProblem(H, np.zeros(3), A_eq=np.ones((1, 3)), b_eq=np.array([1.0]),
                   lb=np.zeros(3), ub=np.ones(3))
    x, d = solve_qp(qp)
    ref = (1 / np.diag(H)) / (1 / np.diag(H)).sum()
    np.testing.assert_allclose(x, ref, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 20))
def test_matches_enumeration_oracle(seed):
    H, f, lb, ub, G, h = random_box_budget_qp(np.random.default_rng(seed))
    x, d = solve_qp(QpProblem(H, f, G=G, h=h, lb=lb, ub=ub))
    best, bx = qp_enumerate(H, f, lb, ub, G, h)
    assert d.status == "optimal" and d.kkt <= 1e-6
    assert abs(d.objective - best) <= 1e-6 * max(1.0, abs(best))
    if np.linalg.eigvalsh(H).min() > 1e-6:
        np.testing.assert_allclose(x, bx, atol=1e-6)


def test_reported_residuals_match_recomputation():
    H, f, lb, ub, G, h = random_box_budget_qp(np.random.default_rng(3))
    qp = QpProblem(H, f, G=G, h=h, lb=lb, ub=ub)
    x, d = solve_qp(qp)
    res = kkt_residuals(qp, x, d.z_ineq, d.z_upper, d.z_lower, d.nu)
    assert max(res) == pytest.approx(d.kkt, abs=1e-15)


def test_deterministic():
    H, f, lb, ub, G, h = random_box_budget_qp(np.random.default_rng(8))
    qp = QpProblem(H, f, G=G, h=h, lb=lb, ub=ub)
    a, _ = solve_qp(qp)
    b, _ = solve_qp(qp)
    assert np.array_equal(a, b)


def test_warm_start_gives_same_answer():
    H, f, lb, ub, G, h = random_box_budget_qp(np.random.default_rng(12))
    H = H + np.eye(len(f))
    qp = QpProblem(H, f, G=G, h=h, lb=lb, ub=ub)
    a, _ = solve_qp(qp)
    b, _ = solve_qp(qp, x0=0.5 * (lb + ub))
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_infeasible_general_rows():
    qp = QpProblem(np.eye(2), np.zeros(2), G=np.array([[-1.0, -1.0]]), h=np.array([-3.0]),
                   lb=np.zeros(2), ub=np.ones(2))
    with pytest.raises(InfeasibleError) as info:
        solve_qp(qp)
    cert = info.value.certificate
    assert cert is not None and np.all(np.asarray(cert) >= -1e-9)


def test_empty_box_and_shapes():
    with pytest.raises(InfeasibleError):
        QpProblem(np.eye(1), np.zeros(1), lb=np.ones(1), ub=np.zeros(1))
    with pytest.raises(ShapeError):
        QpProblem(np.eye(2), np.zeros(3))
    with pytest.raises(ParameterError):
        solve_qp(QpProblem(np.eye(1), np.zeros(1)), tol=0.0)


def test_max_iter_reports_status():
    H, f, lb, ub, G, h = random_box_budget_qp(np.random.default_rng(5))
    _, d = solve_qp(QpProblem(H, f, G=G, h=h, lb=lb, ub=ub), max_iter=1)
    assert d.status == "max_iter"
    assert d.iterations == 1 and d.kkt > 1e-6
