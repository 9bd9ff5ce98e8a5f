"""Dense convex QP solver.

Solves

    minimize    1/2 x^T H x + f^T x
    subject to  G x <= h,  lb <= x <= ub,  A_eq x = b_eq

with a Mehrotra predictor-corrector interior-point method. Bound rows are
kept apart from the general rows so the reduced Newton matrix only picks
up diagonal terms from them. A final active-set solve ("polish") sharpens
the iterate when the guessed active set gives a nonsingular KKT system.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from netctl.errors import InfeasibleError, ParameterError, ShapeError


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        nv = self.f.shape[0]
        self.H = np.asarray(self.H, dtype=float)
        if self.H.shape != (nv, nv):
            raise ShapeError(f"H must be {nv}x{nv}")
        if self.G is None:
            self.G, self.h = np.zeros((0, nv)), np.zeros(0)
        if self.A_eq is None:
            self.A_eq, self.b_eq = np.zeros((0, nv)), np.zeros(0)
        self.lb = np.full(nv, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(nv, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.G.shape[1] != nv or self.h.shape != (self.G.shape[0],):
            raise ShapeError("G, h have inconsistent shapes")
        if self.A_eq.shape[1] != nv or self.b_eq.shape != (self.A_eq.shape[0],):
            raise ShapeError("A_eq, b_eq have inconsistent shapes")
        if np.any(self.lb > self.ub):
            raise InfeasibleError("box is empty: some lb > ub")

    @property
    def num_vars(self) -> int:
        return self.f.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)

    def stacked(self):
        """All inequality rows, bounds included, as one ``(G, h)`` pair."""
        nv = self.num_vars
        I = np.eye(nv)
        iu, il = np.isfinite(self.ub), np.isfinite(self.lb)
        G = np.vstack([self.G, I[iu], -I[il]])
        h = np.concatenate([self.h, self.ub[iu], -self.lb[il]])
        return G, h


@dataclass
class QpDiagnostics:
    status: str
    iterations: int
    objective: float
    stationarity: float
    primal: float
    dual: float
    complementarity: float
    polished: bool = False
    z_ineq: np.ndarray = field(default=None, repr=False)
    z_upper: np.ndarray = field(default=None, repr=False)
    z_lower: np.ndarray = field(default=None, repr=False)
    nu: np.ndarray = field(default=None, repr=False)

    @property
    def kkt(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


class _Rows:
    """Inequality operator: general rows, then upper bounds, then lower bounds."""

    def __init__(self, qp: QpProblem):
        self.G = qp.G
        self.iu = np.flatnonzero(np.isfinite(qp.ub))
        self.il = np.flatnonzero(np.isfinite(qp.lb))
        self.mg = qp.G.shape[0]
        self.mu = self.iu.size
        self.h = np.concatenate([qp.h, qp.ub[self.iu], -qp.lb[self.il]])
        self.nv = qp.num_vars

    @property
    def m(self):
        return self.h.size

    def split(self, y):
        return y[:self.mg], y[self.mg:self.mg + self.mu], y[self.mg + self.mu:]

    def apply(self, x):
        return np.concatenate([self.G @ x, x[self.iu], -x[self.il]])

    def apply_t(self, y):
        yg, yu, yl = self.split(y)
        out = self.G.T @ yg
        np.add.at(out, self.iu, yu)
        np.subtract.at(out, self.il, yl)
        return out

    def weighted_gram(self, w):
        wg, wu, wl = self.split(w)
        M = (self.G.T * wg) @ self.G
        d = np.zeros(self.nv)
        np.add.at(d, self.iu, wu)
        np.add.at(d, self.il, wl)
        M[np.diag_indices(self.nv)] += d
        return M


def kkt_residuals(qp: QpProblem, x, z_ineq, z_upper, z_lower, nu):
    """Infinity-norm stationarity, primal, dual and complementarity residuals."""
    grad = qp.H @ x + qp.f + qp.G.T @ z_ineq + z_upper - z_lower + qp.A_eq.T @ nu
    slack_g = qp.h - qp.G @ x
    slack_u = np.where(np.isfinite(qp.ub), qp.ub - x, np.inf)
    slack_l = np.where(np.isfinite(qp.lb), x - qp.lb, np.inf)
    primal = max(
        np.max(-slack_g, initial=0.0),
        np.max(-slack_u, initial=0.0),
        np.max(-slack_l, initial=0.0),
        np.max(np.abs(qp.A_eq @ x - qp.b_eq), initial=0.0),
    )
    dual = max(np.max(-z_ineq, initial=0.0), np.max(-z_upper, initial=0.0),
               np.max(-z_lower, initial=0.0))

    def comp(z, s):
        fin = np.isfinite(s)
        return np.max(np.abs(z[fin] * s[fin]), initial=0.0)

    complementarity = max(comp(z_ineq, slack_g), comp(z_upper, slack_u), comp(z_lower, slack_l))
    return float(np.max(np.abs(grad), initial=0.0)), float(primal), float(dual), float(complementarity)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _newton_solver(M, A_eq, reg):
    nv = M.shape[0]
    me = A_eq.shape[0]
    M = M + reg * np.eye(nv)
    if me == 0:
        try:
            fac = scipy.linalg.cho_factor(M, check_finite=False)
            return lambda r1, r2: (scipy.linalg.cho_solve(fac, r1, check_finite=False), np.zeros(0))
        except np.linalg.LinAlgError:
            pass
    K = np.block([[M, A_eq.T], [A_eq, -reg * np.eye(me)]])
    lu = scipy.linalg.lu_factor(K, check_finite=False)

    def solve(r1, r2):
        sol = scipy.linalg.lu_solve(lu, np.concatenate([r1, r2]), check_finite=False)
        return sol[:nv], sol[nv:]
    return solve


def _ipm(qp: QpProblem, x0, tol, max_iter):
    rows = _Rows(qp)
    nv, m, me = qp.num_vars, rows.m, qp.A_eq.shape[0]
    x = np.zeros(nv) if x0 is None else np.asarray(x0, dtype=float).copy()
    fin_l, fin_u = np.isfinite(qp.lb), np.isfinite(qp.ub)
    both = fin_l & fin_u
    width = np.where(both, qp.ub - qp.lb, 1.0)
    # start strictly inside finite bounds
    lo = np.where(fin_l, qp.lb + 0.05 * np.where(both, width, 1.0), -np.inf)
    hi = np.where(fin_u, qp.ub - 0.05 * np.where(both, width, 1.0), np.inf)
    mid = x.copy()
    mid[both] = 0.5 * (qp.lb[both] + qp.ub[both])
    x = np.where(lo <= hi, np.clip(x, lo, hi), mid)
    s = np.maximum(rows.h - rows.apply(x), 1.0)
    z = np.ones(m)
    nu = np.zeros(me)
    scale = 1.0 + max(np.max(np.abs(qp.f), initial=0.0), np.max(np.abs(qp.H), initial=0.0))
    reg = 1e-13 * scale

    best = None
    it = 0
    for it in range(1, max_iter + 1):
        r_d = qp.H @ x + qp.f + rows.apply_t(z) + qp.A_eq.T @ nu
        r_e = qp.A_eq @ x - qp.b_eq
        r_p = rows.apply(x) + s - rows.h
        mu = float(s @ z / m) if m else 0.0
        err = max(np.max(np.abs(r_d), initial=0.0), np.max(np.abs(r_e), initial=0.0),
                  np.max(np.abs(r_p), initial=0.0), np.max(s * z, initial=0.0))
        if best is None or err < best[0]:
            best = (err, x.copy(), z.copy(), nu.copy())
        if err <= tol:
            break
        if m and np.max(z) > 1e14:
            break
        w = z / s
        solve = _newton_solver(qp.H + rows.weighted_gram(w), qp.A_eq, reg)

        def direction(r_c):
            rhs = -r_d - rows.apply_t((z * r_p - r_c) / s)
            dx, dnu = solve(rhs, -r_e)
            dz = w * rows.apply(dx) + (z * r_p - r_c) / s
            ds = -r_p - rows.apply(dx)
            return dx, ds, dz, dnu

        dx, ds, dz, dnu = direction(s * z)
        if m:
            a_aff = min(_max_step(s, ds), _max_step(z, dz))
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz) / m)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dx, ds, dz, dnu = direction(s * z + ds * dz - sigma * mu)
            eta = max(0.9, 1.0 - 10.0 * mu)
            alpha = min(1.0, eta * min(_max_step(s, ds), _max_step(z, dz)))
        else:
            alpha = 1.0
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        nu = nu + alpha * dnu
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)
    err, x, z, nu = best
    return x, z, nu, it, err, rows


def _polish(qp: QpProblem, x, z, rows):
    """Re-solve with the guessed active set held as equalities."""
    G_all, h_all = qp.stacked()
    slack = h_all - G_all @ x
    active = np.flatnonzero(z > np.maximum(slack, 1e-12))
    Ga = G_all[active]
    me = qp.A_eq.shape[0]
    nv = qp.num_vars
    K = np.zeros((nv + active.size + me, nv + active.size + me))
    K[:nv, :nv] = qp.H
    K[:nv, nv:nv + active.size] = Ga.T
    K[nv:nv + active.size, :nv] = Ga
    K[:nv, nv + active.size:] = qp.A_eq.T
    K[nv + active.size:, :nv] = qp.A_eq
    rhs = np.concatenate([-qp.f, h_all[active], qp.b_eq])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(K, check_finite=False)
        if np.min(np.abs(np.diag(lu[0]))) < 1e-12 * max(1.0, np.max(np.abs(K))):
            return None
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    xp = sol[:nv]
    zp = np.zeros(h_all.size)
    zp[active] = sol[nv:nv + active.size]
    return xp, zp, sol[nv + active.size:]


def _split_multipliers(qp, z_all):
    mg = qp.G.shape[0]
    iu = np.flatnonzero(np.isfinite(qp.ub))
    il = np.flatnonzero(np.isfinite(qp.lb))
    z_ineq = z_all[:mg]
    z_upper = np.zeros(qp.num_vars)
    z_upper[iu] = z_all[mg:mg + iu.size]
    z_lower = np.zeros(qp.num_vars)
    z_lower[il] = z_all[mg + iu.size:]
    return z_ineq, z_upper, z_lower


def _phase_one(qp: QpProblem, tol):
    """Minimize the worst general-row violation t subject to the box."""
    nv, mg = qp.num_vars, qp.G.shape[0]
    G1 = np.hstack([qp.G, -np.ones((mg, 1))])
    aux = QpProblem(
        H=np.zeros((nv + 1, nv + 1)), f=np.r_[np.zeros(nv), 1.0], G=G1, h=qp.h,
        lb=np.r_[qp.lb, 0.0], ub=np.r_[qp.ub, np.inf],
        A_eq=np.hstack([qp.A_eq, np.zeros((qp.A_eq.shape[0], 1))]), b_eq=qp.b_eq,
    )
    x, z, _, _, _, _ = _ipm(aux, None, tol, 200)
    return x[-1], z[:mg]


def solve_qp(qp: QpProblem, tol: float = 1e-6, x0=None, max_iter: int = 200):
    """Return ``(x, diagnostics)`` with all KKT residuals <= ``tol`` on success.

    ``x0`` is an optional starting hint. Raises InfeasibleError with a
    Farkas-style certificate when the constraints cannot be met.
    """
    if tol <= 0:
        raise ParameterError("tol must be positive")
    x, z_all, nu, it, _, rows = _ipm(qp, x0, 1e-3 * tol, max_iter)
    zi, zu, zl = _split_multipliers(qp, np.maximum(z_all, 0.0))
    res = kkt_residuals(qp, x, zi, zu, zl, nu)
    polished = False
    if rows.m:
        pol = _polish(qp, x, z_all, rows)
        if pol is not None:
            xp, zp, nup = pol
            zpi, zpu, zpl = _split_multipliers(qp, zp)
            res_p = kkt_residuals(qp, xp, zpi, zpu, zpl, nup)
            if max(res_p) < max(res):
                x, zi, zu, zl, nu, res, polished = xp, zpi, zpu, zpl, nup, res_p, True
    status = "optimal" if max(res) <= tol else "max_iter"
    if status != "optimal" and res[1] > tol and qp.G.shape[0]:
        t, cert = _phase_one(qp, 1e-3 * tol)
        if t > tol:
            raise InfeasibleError(
                f"constraints infeasible: minimal worst-row violation {t:.3g}",
                certificate=cert)
    diag = QpDiagnostics(status, it, qp.objective(x), *res, polished=polished,
                         z_ineq=zi, z_upper=zu, z_lower=zl, nu=nu)
    return x, diag
