"""N-intertwined mean-field SIS baseline.

Each node carries an infection probability obeying

    dx_i/dt = beta_i (1 - x_i) sum_j a_ij x_j - delta_i x_i,

integrated with classic fixed-step RK4 on the known graph.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from netctl.errors import IntegrationError, ParameterError, ShapeError
from netctl.netgraph import spectral_radius

log = logging.getLogger(__name__)

CLAMP_WARN = 1e-6
CLAMP_FAIL = 1e-3


def _rhs(A, beta, delta):
    def f(x):
        return beta * (1.0 - x) * (A @ x) - delta * x
    return f


def simulate_meanfield(g, params, u, x0, t_grid, max_step: float = 0.01) -> np.ndarray:
    """Mean-field probabilities at each time of ``t_grid``, shape (len, n).

    Raises IntegrationError if a step leaves [0, 1] by more than 1e-3.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (g.n,):
        raise ShapeError(f"x0 has shape {x.shape}, expected ({g.n},)")
    if np.any(x < 0) or np.any(x > 1):
        raise ParameterError("x0 must lie in [0, 1]^n")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0):
        raise ParameterError("t_grid must be increasing")
    beta = params.beta0 - np.asarray(u, dtype=float)
    if np.any(beta < -1e-12):
        raise ParameterError("control exceeds beta0")
    f = _rhs(g.adjacency, np.clip(beta, 0.0, None), params.delta)

    out = np.empty((t_grid.size, g.n))
    t = 0.0
    worst = 0.0
    for k, t_target in enumerate(t_grid):
        span = t_target - t
        if span < 0:
            raise ParameterError("t_grid must start at or after 0")
        steps = int(math.ceil(span / max_step - 1e-12)) if span > 0 else 0
        h = span / steps if steps else 0.0
        for _ in range(steps):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            excess = max(0.0, -x.min(), x.max() - 1.0)
            if excess > CLAMP_FAIL:
                raise IntegrationError(f"RK4 step left [0, 1] by {excess:.3g}; reduce max_step")
            worst = max(worst, excess)
            np.clip(x, 0.0, 1.0, out=x)
        t = t_target
        out[k] = x
    if worst > CLAMP_WARN:
        log.warning("mean-field clamp magnitude %.3g exceeds %.0e", worst, CLAMP_WARN)
    return out


def epidemic_threshold(g, params, u=None) -> tuple[float, bool]:
    """Reproduction number beta * lambda_1 / delta.

    Returns ``(R, homogeneous)``. For heterogeneous rates the value is the
    upper bound max(beta) * lambda_1 / min(delta) and the flag is False.
    """
    beta = params.beta0 if u is None else params.beta0 - np.asarray(u, dtype=float)
    homogeneous = bool(np.ptp(beta) == 0 and np.ptp(params.delta) == 0)
    b, d = float(beta.max()), float(params.delta.min())
    if b == 0:
        return 0.0, homogeneous
    if d <= 0:
        return math.inf, homogeneous
    return b * spectral_radius(g) / d, homogeneous
