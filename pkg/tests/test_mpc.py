import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netctl import gemf, koopman, lifting, mpc, netgraph
from netctl.errors import ConditioningError, ParameterError, ShapeError
from netctl.qp import solve_qp


def toy_model(n=4, N=7, l=None, seed=0, scale=0.4):
    rng = np.random.default_rng(seed)
    l = n if l is None else l
    d = lifting.Dictionary(rng.random((N - 1, n)), 0.8)
    A = rng.normal(size=(N, N)) * scale / np.sqrt(N)
    return koopman.KoopmanModel("full", A, rng.normal(size=(N, l)), rng.normal(size=(n, N)), d)


def random_spec(rng, n, l, p, budget=True, state_rows=0):
    def psd(k):
        M = rng.normal(size=(k, k))
        return M @ M.T / k

    spec = dict(p=p, Qhat=np.array([psd(n) for _ in range(p + 1)]),
                qhat=rng.normal(size=(p + 1, n)),
                R=np.array([psd(l) + 0.1 * np.eye(l) for _ in range(p)]),
                r=rng.normal(size=(p, l)), u_low=-rng.random(l), u_high=rng.random(l),
                budget=float(rng.random()) if budget else None)
    if state_rows:
        spec.update(Ehat=rng.normal(size=(p + 1, state_rows, n)),
                    D=rng.normal(size=(p, state_rows, l)) * 0.1,
                    b=100.0 + rng.random((p + 1, state_rows)))
    return mpc.MpcSpec(**spec)


def mpc_cost(model, spec, z0, U):
    """Direct simulation of the horizon cost for stacked inputs U (p x l)."""
    z = np.asarray(z0, dtype=float)
    total = 0.0
    for i in range(spec.p + 1):
        x = model.C @ z
        total += x @ spec.Qhat[i] @ x + spec.qhat[i] @ x
        if i < spec.p:
            total += U[i] @ spec.R[i] @ U[i] + spec.r[i] @ U[i]
            z = model.A @ z + model.B @ U[i]
    return total


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 20), st.integers(1, 4))
def test_condensed_cost_matches_simulation(seed, p):
    rng = np.random.default_rng(seed)
    model = toy_model(seed=seed)
    spec = random_spec(rng, 4, 4, p)
    z0 = rng.normal(size=model.order)
    qp = mpc.condense_qp(model, spec, z0)
    U = rng.normal(size=(p, 4))
    u = U.reshape(-1)
    assert qp.objective(u) + qp.const == pytest.approx(mpc_cost(model, spec, z0, U), rel=1e-9,
                                                       abs=1e-9)


@pytest.mark.parametrize("seed", range(12))
def test_condensed_and_sparse_agree(seed):
    rng = np.random.default_rng(seed)
    model = toy_model(seed=seed)
    spec = random_spec(rng, 4, 4, int(rng.integers(1, 4)), state_rows=2 if seed % 2 else 0)
    z0 = rng.normal(size=model.order)
    u_c, d_c = solve_qp(mpc.condense_qp(model, spec, z0))
    u_s, d_s = solve_qp(mpc.sparse_qp(model, spec, z0))
    assert d_c.status == "optimal" and d_s.status == "optimal"
    np.testing.assert_allclose(u_s[:spec.p * 4], u_c, atol=1e-6)


def test_single_step_hessian():
    rng = np.random.default_rng(1)
    model = toy_model(seed=1)
    spec = random_spec(rng, 4, 4, 1, budget=False)
    qp = mpc.condense_qp(model, spec, rng.normal(size=model.order))
    CB = model.C @ model.B
    np.testing.assert_allclose(qp.H, 2.0 * (spec.R[0] + CB.T @ spec.Qhat[1] @ CB), atol=1e-12)
    assert qp.num_vars == 4 and qp.n_budget_rows == 0


def test_budget_spec_counts():
    spec = mpc.make_limited_budget_spec(100, 1.0, 70.0, 3)
    for N, r in ((201, None), (201, 5)):
        rng = np.random.default_rng(0)
        d = lifting.Dictionary(rng.random((N - 1, 100)), 3.0)
        if r is None:
            model = koopman.KoopmanModel("full", np.eye(N) * 0.5, rng.normal(size=(N, 100)),
                                         rng.normal(size=(100, N)), d)
        else:
            enc = np.linalg.qr(rng.normal(size=(N, r)))[0].T
            model = koopman.KoopmanModel("reduced", np.eye(r) * 0.5, rng.normal(size=(r, 100)),
                                         rng.normal(size=(100, r)), d, enc)
        qp = mpc.condense_qp(model, spec, model.encode(np.ones(100)))
        assert qp.num_vars == 300
        assert qp.n_budget_rows == 3 and qp.G.shape == (3, 300)
        assert qp.n_box_rows == 600
        assert not np.any(qp.H)
    assert mpc.make_limited_budget_spec(10, 1.0, 10.0, 1).budget == 10.0
    with pytest.raises(ParameterError):
        mpc.make_limited_budget_spec(10, 1.0, 10.5, 3)
    with pytest.raises(ParameterError):
        mpc.make_limited_budget_spec(10, 1.0, 0.0, 3)


def test_min_cost_spec_structure():
    spec = mpc.make_min_cost_spec(100, 1.0, 3)
    assert spec.budget is None
    np.testing.assert_array_equal(spec.Qhat[1], np.eye(100))
    np.testing.assert_array_equal(spec.qhat, 0.5)
    np.testing.assert_array_equal(spec.R[0], 0.3 * np.eye(100))
    np.testing.assert_array_equal(spec.r, 0.1)
    model = toy_model(n=100, N=120, seed=2)
    qp = mpc.condense_qp(model, spec, np.zeros(120))
    assert qp.num_vars == 300 and qp.n_box_rows == 600 and qp.G.shape[0] == 0
    # first input block couples to x_1, x_2, x_3 through C A^k B
    ref = 0.3 * np.eye(100)
    AkB = model.B
    for _ in range(3):
        M = model.C @ AkB
        ref = ref + M.T @ M
        AkB = model.A @ AkB
    np.testing.assert_allclose(qp.H[:100, :100], 2 * ref, rtol=1e-10, atol=1e-10)


def test_zero_model_min_cost_gives_zero_input():
    n, N = 5, 8
    d = lifting.Dictionary(np.random.default_rng(0).random((N - 1, n)), 0.5)
    model = koopman.KoopmanModel("full", np.eye(N), np.zeros((N, n)), np.zeros((n, N)), d)
    qp = mpc.condense_qp(model, mpc.make_min_cost_spec(n, 1.0, 3), model.encode(np.ones(n)))
    u, diag = solve_qp(qp)
    np.testing.assert_allclose(u, 0.0, atol=1e-7)
    assert diag.kkt <= 1e-6


def test_zero_costs_box_only():
    model = toy_model()
    spec = mpc.MpcSpec(p=2, Qhat=np.zeros((3, 4, 4)), qhat=np.zeros((3, 4)),
                       R=np.zeros((2, 4, 4)), r=np.zeros((2, 4)), u_low=np.zeros(4),
                       u_high=np.ones(4))
    qp = mpc.condense_qp(model, spec, np.ones(model.order))
    assert not np.any(qp.H) and not np.any(qp.f)
    u, d = solve_qp(qp)
    assert np.all((u >= -1e-9) & (u <= 1 + 1e-9)) and d.status == "optimal"


def test_spec_validation():
    base = dict(p=1, Qhat=np.zeros((2, 2, 2)), qhat=np.zeros((2, 2)), R=np.zeros((1, 2, 2)),
                r=np.zeros((1, 2)), u_low=np.zeros(2), u_high=np.ones(2))
    bad = dict(base, Qhat=np.array([np.zeros((2, 2)), -np.eye(2)]))
    with pytest.raises(ParameterError, match="positive semidefinite"):
        mpc.MpcSpec(**bad)
    with pytest.raises(ParameterError, match="symmetric"):
        mpc.MpcSpec(**dict(base, R=np.array([[[0.0, 1.0], [0.0, 0.0]]])))
    with pytest.raises(ShapeError):
        mpc.MpcSpec(**dict(base, qhat=np.zeros((1, 2))))
    with pytest.raises(ParameterError):
        mpc.MpcSpec(**dict(base, p=0))
    spec = mpc.MpcSpec(**base)
    assert mpc.MpcSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()
    with pytest.raises(ShapeError):
        mpc.condense_qp(toy_model(n=3), spec, np.zeros(7))


def test_indefinite_condensed_hessian_is_rejected():
    model = toy_model()
    spec = random_spec(np.random.default_rng(0), 4, 4, 2)
    spec.R = -np.repeat(np.eye(4)[None], 2, axis=0) * 5.0  # bypasses construction checks
    with pytest.raises(ConditioningError):
        mpc.condense_qp(model, spec, np.zeros(model.order))


def decreasing_model(n=6, N=9, seed=0):
    """Model in which every unit of control lowers the matching node's state."""
    rng = np.random.default_rng(seed)
    d = lifting.Dictionary(rng.random((N - 1, n)), 0.8)
    C = rng.normal(size=(n, N))
    B = -np.linalg.pinv(C)
    return koopman.KoopmanModel("full", 0.5 * np.eye(N), B, C, d)


@pytest.fixture(scope="module")
def small_plant():
    g = netgraph.generate("er", 6, 3, seed=2)
    return g, gemf.EpidemicParams.homogeneous(6, 1.0, 2.0)


def test_full_budget_stops_infection(small_plant):
    g, p = small_plant
    model = decreasing_model()
    spec = mpc.make_limited_budget_spec(6, 1.0, 6.0, 3)
    lg = mpc.mpc_closed_loop(g, p, model, spec, np.ones(6, np.uint8), 6, seed=1)
    np.testing.assert_allclose(lg.input_matrix(), 1.0, atol=1e-6)
    assert lg.total_new_infections == 0
    assert np.all(np.diff(lg.infected_fraction) <= 0)
    fixed = mpc.fixed_input_run(g, p, mpc.uniform_allocation(6, 6.0, p.beta0), np.ones(6, np.uint8),
                                6, seed=1)
    assert fixed.total_new_infections == 0


def test_closed_loop_log_and_constraints(small_plant, tmp_path):
    g, p = small_plant
    rng = np.random.default_rng(0)
    X, _ = gemf.draw_snapshot_inputs(6, 400, 0.0, 1.0, 3)
    d = lifting.build_dictionary(lifting.kmeans_centers(X, 10, seed=0))
    ds = gemf.collect_dataset(g, p, d, 400, 4, 1.0, 0.0, 1.0, 3)
    model, _ = koopman.fit_full(ds, d)
    spec = mpc.make_limited_budget_spec(6, 1.0, 3.0, 3)
    x0 = mpc.initial_infection(6, 0.5, rng)
    lg = mpc.mpc_closed_loop(g, p, model, spec, x0, 8, seed=4, warm_start=False)
    U = lg.input_matrix()
    assert U.shape == (8, 6) and len(lg.t) == 9
    assert np.all(U >= -1e-9) and np.all(U <= 1 + 1e-9)
    assert np.all(U.sum(axis=1) <= 3.0 + 1e-6)
    assert max(lg.kkt_residual) <= 1e-6
    assert np.all(np.diff(lg.new_infections_cum) >= 0)
    again = mpc.mpc_closed_loop(g, p, model, spec, x0, 8, seed=4, warm_start=False)
    np.testing.assert_array_equal(again.input_matrix(), U)
    # receding horizon: the applied input is the first block of a fresh solve
    x = lg.states[3].astype(float)
    u_first, _ = solve_qp(mpc.condense_qp(model, spec, model.encode(x)))
    np.testing.assert_allclose(U[3], np.clip(u_first[:6], 0.0, 1.0), atol=1e-12)
    mpc.save_log(lg, tmp_path)
    header = (tmp_path / "mpc_log.csv").read_text().splitlines()[0]
    assert header == "t,infected_fraction,new_infections_cum,u_total,qp_iters,kkt_residual"
    assert np.loadtxt(tmp_path / "mpc_inputs.csv", delimiter=",").shape == (8, 6)


def test_uniform_allocation_and_initial_infection():
    np.testing.assert_allclose(mpc.uniform_allocation(100, 70.0), 0.7)
    np.testing.assert_allclose(mpc.uniform_allocation(4, 8.0, np.ones(4)), 1.0)
    x = mpc.initial_infection(100, 0.9, np.random.default_rng(0))
    assert x.sum() == 90 and x.dtype == np.uint8
