import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from netctl import gemf, meanfield, netgraph
from netctl.errors import IntegrationError, ParameterError, ShapeError


def test_isolated_nodes_decay_exponentially():
    g = netgraph.Graph.from_edges(3, [])
    p = gemf.EpidemicParams.homogeneous(3, 1.0, 2.0)
    t = np.linspace(0.5, 3.0, 6)
    out = meanfield.simulate_meanfield(g, p, np.zeros(3), np.array([1.0, 0.5, 0.0]), t)
    np.testing.assert_allclose(out[:, 0], np.exp(-2 * t), rtol=1e-7)
    np.testing.assert_allclose(out[:, 1], 0.5 * np.exp(-2 * t), rtol=1e-7)
    np.testing.assert_array_equal(out[:, 2], 0.0)


def test_matches_adaptive_reference():
    g = netgraph.generate("er", 20, 4, seed=3)
    p = gemf.EpidemicParams.homogeneous(20, 1.0, 2.0)
    u = np.linspace(0.0, 0.5, 20)
    x0 = np.random.default_rng(0).random(20)
    t = np.linspace(0.1, 5.0, 12)
    A, beta = g.adjacency, p.beta0 - u

    def rhs(_, x):
        return beta * (1 - x) * (A @ x) - p.delta * x

    ref = solve_ivp(rhs, (0, 5.0), x0, t_eval=t, rtol=1e-11, atol=1e-13).y.T
    out = meanfield.simulate_meanfield(g, p, u, x0, t)
    np.testing.assert_allclose(out, ref, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.0, 1.0))
def test_bounded_and_monotone_in_control(seed, frac):
    g = netgraph.generate("er", 12, 4, seed=seed)
    p = gemf.EpidemicParams.homogeneous(12, 1.0, 0.5)
    x0 = np.random.default_rng(seed).random(12)
    t = np.array([1.0, 3.0])
    lo = meanfield.simulate_meanfield(g, p, np.full(12, frac), x0, t)
    hi = meanfield.simulate_meanfield(g, p, np.zeros(12), x0, t)
    assert np.all((lo >= 0) & (lo <= 1))
    assert np.all(lo <= hi + 1e-12)


def test_subcritical_decays_supercritical_persists():
    g = netgraph.generate("er", 30, 6, seed=1)
    lam = netgraph.spectral_radius(g)
    x0 = np.full(30, 0.5)
    sub = gemf.EpidemicParams.homogeneous(30, 0.5 / lam, 1.0)
    sup = gemf.EpidemicParams.homogeneous(30, 3.0 / lam, 1.0)
    R_sub, homog = meanfield.epidemic_threshold(g, sub)
    assert R_sub == pytest.approx(0.5, rel=1e-6) and homog
    assert meanfield.epidemic_threshold(g, sup)[0] == pytest.approx(3.0, rel=1e-6)
    end_sub = meanfield.simulate_meanfield(g, sub, np.zeros(30), x0, [40.0])[-1]
    end_sup = meanfield.simulate_meanfield(g, sup, np.zeros(30), x0, [40.0])[-1]
    assert end_sub.max() < 1e-3
    assert end_sup.mean() > 0.3


def test_threshold_flags_heterogeneity():
    g = netgraph.Graph.from_edges(2, [(0, 1)])
    p = gemf.EpidemicParams(np.array([1.0, 0.5]), np.array([2.0, 4.0]))
    R, homog = meanfield.epidemic_threshold(g, p)
    assert not homog and R == pytest.approx(1.0 * 1.0 / 2.0)
    R, _ = meanfield.epidemic_threshold(g, p, u=np.array([1.0, 0.5]))
    assert R == 0.0
    R, _ = meanfield.epidemic_threshold(g, gemf.EpidemicParams.homogeneous(2, 1.0, 0.0))
    assert math.isinf(R)


def test_validation_and_divergence():
    g = netgraph.Graph.from_edges(2, [(0, 1)])
    p = gemf.EpidemicParams.homogeneous(2, 1.0, 2.0)
    with pytest.raises(ShapeError):
        meanfield.simulate_meanfield(g, p, np.zeros(2), np.zeros(3), [1.0])
    with pytest.raises(ParameterError):
        meanfield.simulate_meanfield(g, p, np.zeros(2), np.array([1.5, 0.0]), [1.0])
    with pytest.raises(ParameterError):
        meanfield.simulate_meanfield(g, p, np.zeros(2), np.zeros(2), [2.0, 1.0])
    with pytest.raises(ParameterError):
        meanfield.simulate_meanfield(g, p, np.full(2, 2.0), np.zeros(2), [1.0])
    fast = gemf.EpidemicParams.homogeneous(2, 1.0, 400.0)
    with pytest.raises(IntegrationError):
        meanfield.simulate_meanfield(g, fast, np.zeros(2), np.ones(2), [1.0], max_step=0.1)
