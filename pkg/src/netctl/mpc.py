"""Koopman MPC: dense QP construction, closed loop and scenario builders.

The horizon-p problem

    min  sum_{i=0..p} x_i^T Qh_i x_i + qh_i^T x_i + sum_{i<p} u_i^T R_i u_i + r_i^T u_i
    s.t. z_{i+1} = A z_i + B u_i,   x_i = C z_i,
         Eh_i x_i + D_i u_i <= b_i,  Eh_p x_p <= b_p,
         lb <= u_i <= ub,  1^T u_i <= u_T

is condensed by eliminating the lifted states, so the QP has exactly
``p * l`` variables whatever the lifted dimension.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from netctl import gemf
from netctl.errors import ConditioningError, NetctlError, ParameterError, ShapeError
from netctl.koopman import KoopmanModel
from netctl.qp import QpProblem, solve_qp

log = logging.getLogger(__name__)

PSD_FLOOR = -1e-10


def _check_psd(M, name):
    if not np.allclose(M, M.T, atol=1e-12, rtol=0):
        raise ParameterError(f"{name} must be symmetric")
    if M.size:
        lam = np.linalg.eigvalsh(M).min()
        if lam < PSD_FLOOR:
            raise ParameterError(f"{name} is not positive semidefinite (eigenvalue {lam:.3g})")


@dataclass
class MpcSpec:
    """Costs and constraints of the horizon-p problem in the network state.

    Stage quantities are stacked along the first axis: ``Qhat`` and
    ``qhat`` have p + 1 stages (the last one terminal), ``R`` and ``r``
    have p. State constraints are optional; when ``Ehat`` is given,
    ``D`` (p stages) and ``b`` (p + 1 stages) must be too.
    """

    p: int
    Qhat: np.ndarray            # (p+1, n, n)
    qhat: np.ndarray            # (p+1, n)
    R: np.ndarray               # (p, l, l)
    r: np.ndarray               # (p, l)
    u_low: np.ndarray           # (l,)
    u_high: np.ndarray          # (l,)
    budget: float | None = None
    Ehat: np.ndarray | None = None   # (p+1, nc, n)
    D: np.ndarray | None = None      # (p, nc, l)
    b: np.ndarray | None = None      # (p+1, nc)
    name: str = "custom"

    def __post_init__(self):
        if self.p < 1:
            raise ParameterError("horizon p must be at least 1")
        p, n, l = self.p, self.n, self.l
        shapes = {"Qhat": (p + 1, n, n), "qhat": (p + 1, n), "R": (p, l, l), "r": (p, l),
                  "u_low": (l,), "u_high": (l,)}
        for key, shape in shapes.items():
            val = np.asarray(getattr(self, key), dtype=float)
            if val.shape != shape:
                raise ShapeError(f"{key} has shape {val.shape}, expected {shape}")
            setattr(self, key, val)
        if np.any(self.u_low > self.u_high):
            raise ParameterError("u_low exceeds u_high")
        for i in range(p + 1):
            _check_psd(self.Qhat[i], f"Qhat[{i}]")
        for i in range(p):
            _check_psd(self.R[i], f"R[{i}]")
        if self.Ehat is not None:
            self.Ehat = np.asarray(self.Ehat, dtype=float)
            nc = self.Ehat.shape[1]
            self.D = np.zeros((p, nc, l)) if self.D is None else np.asarray(self.D, dtype=float)
            self.b = np.asarray(self.b, dtype=float)
            if (self.Ehat.shape != (p + 1, nc, n) or self.D.shape != (p, nc, l)
                    or self.b.shape != (p + 1, nc)):
                raise ShapeError("state constraint blocks have inconsistent shapes")

    @property
    def n(self) -> int:
        return np.shape(self.Qhat)[1]

    @property
    def l(self) -> int:
        return np.shape(self.R)[1]

    def stage_cost(self, x, u, i=0) -> float:
        """Cost of one measured stage (network state ``x``, input ``u``)."""
        c = float(x @ self.Qhat[i] @ x + self.qhat[i] @ x)
        if u is not None and i < self.p:
            c += float(u @ self.R[i] @ u + self.r[i] @ u)
        return c

    def to_dict(self) -> dict:
        out = {"name": self.name, "p": self.p, "n": self.n, "l": self.l,
               "Qhat": self.Qhat.tolist(), "qhat": self.qhat.tolist(), "R": self.R.tolist(),
               "r": self.r.tolist(), "u_low": self.u_low.tolist(), "u_high": self.u_high.tolist(),
               "budget": self.budget}
        if self.Ehat is not None:
            out.update(Ehat=self.Ehat.tolist(), D=self.D.tolist(), b=self.b.tolist())
        return out

    @classmethod
    def from_dict(cls, d) -> "MpcSpec":
        kw = {k: d[k] for k in ("p", "Qhat", "qhat", "R", "r", "u_low", "u_high")}
        for k in ("budget", "Ehat", "D", "b", "name"):
            if d.get(k) is not None:
                kw[k] = d[k]
        return cls(**kw)


@dataclass
class CondensedQp(QpProblem):
    """Dense MPC program over the stacked inputs (u_0, ..., u_{p-1}).

    The MPC cost equals ``1/2 u^T H u + f^T u + const``.
    """

    const: float = 0.0
    provenance: dict = field(default_factory=dict)
    n_box_rows: int = 0
    n_budget_rows: int = 0
    n_state_rows: int = 0


def _hash(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=float).tobytes()).hexdigest()[:16]


def condense_qp(model: KoopmanModel, spec: MpcSpec, z0) -> CondensedQp:
    """Eliminate z_1..z_p and return the dense QP in the inputs only."""
    A, B, C = model.A, model.B, model.C
    n, l = C.shape[0], B.shape[1]
    if spec.n != n or spec.l != l:
        raise ShapeError(f"spec is for n={spec.n}, l={spec.l}; model has n={n}, l={l}")
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (A.shape[0],):
        raise ShapeError(f"z0 has shape {z0.shape}, expected ({A.shape[0]},)")
    p = spec.p
    nv = p * l

    # free response C A^i z0 and Markov blocks C A^k B
    free = np.empty((p + 1, n))
    z = z0
    for i in range(p + 1):
        free[i] = C @ z
        z = A @ z
    markov = np.empty((p, n, l))
    AkB = B
    for k in range(p):
        markov[k] = C @ AkB
        AkB = A @ AkB
    # Gam[i] maps the stacked inputs to x_i = C z_i
    Gam = np.zeros((p + 1, n, nv))
    for i in range(1, p + 1):
        for j in range(i):
            Gam[i][:, j * l:(j + 1) * l] = markov[i - 1 - j]

    H = np.zeros((nv, nv))
    f = np.zeros(nv)
    const = 0.0
    for i in range(p + 1):
        Qh, qh = spec.Qhat[i], spec.qhat[i]
        QG = Qh @ Gam[i]
        H += 2.0 * Gam[i].T @ QG
        f += 2.0 * QG.T @ free[i] + Gam[i].T @ qh
        const += float(free[i] @ Qh @ free[i] + qh @ free[i])
    for i in range(p):
        sl = slice(i * l, (i + 1) * l)
        H[sl, sl] += 2.0 * spec.R[i]
        f[sl] += spec.r[i]
    H = 0.5 * (H + H.T)
    if nv and np.any(H):
        lam = np.linalg.eigvalsh(H)
        if lam[0] < -1e-8 * max(1.0, np.abs(lam).max()):
            raise ConditioningError(f"condensed Hessian is indefinite (eigenvalue {lam[0]:.3g})",
                                    eigenvalue=float(lam[0]))

    rows, rhs = [], []
    n_budget = 0
    if spec.budget is not None:
        for i in range(p):
            row = np.zeros(nv)
            row[i * l:(i + 1) * l] = 1.0
            rows.append(row)
            rhs.append(spec.budget)
            n_budget += 1
    n_state = 0
    if spec.Ehat is not None:
        for i in range(p + 1):
            Eh = spec.Ehat[i]
            blk = Eh @ Gam[i]
            if i < p:
                blk = blk.copy()
                blk[:, i * l:(i + 1) * l] += spec.D[i]
            rows.extend(blk)
            rhs.extend(spec.b[i] - Eh @ free[i])
            n_state += Eh.shape[0]
    G = np.array(rows).reshape(len(rows), nv)
    h = np.array(rhs, dtype=float)
    lb, ub = np.tile(spec.u_low, p), np.tile(spec.u_high, p)
    n_box = int(np.isfinite(lb).sum() + np.isfinite(ub).sum())
    return CondensedQp(H=H, f=f, G=G, h=h, lb=lb, ub=ub, const=const,
                       provenance={"model": model.dict_id + ":" + model.variant,
                                   "z0": _hash(z0)},
                       n_box_rows=n_box, n_budget_rows=n_budget, n_state_rows=n_state)


def sparse_qp(model: KoopmanModel, spec: MpcSpec, z0) -> QpProblem:
    """Same MPC problem with z_1..z_p kept as variables and dynamics as equalities.

    Variables are ordered (u_0..u_{p-1}, z_1..z_p). Used to cross-check the
    condensation.
    """
    A, B, C = model.A, model.B, model.C
    d, l, p = A.shape[0], B.shape[1], spec.p
    nu_, nz = p * l, p * d
    nv = nu_ + nz
    H = np.zeros((nv, nv))
    f = np.zeros(nv)

    def zsl(i):  # slice of z_i, i >= 1
        return slice(nu_ + (i - 1) * d, nu_ + i * d)

    for i in range(p):
        sl = slice(i * l, (i + 1) * l)
        H[sl, sl] = 2.0 * spec.R[i]
        f[sl] = spec.r[i]
    for i in range(1, p + 1):
        H[zsl(i), zsl(i)] = 2.0 * C.T @ spec.Qhat[i] @ C
        f[zsl(i)] = C.T @ spec.qhat[i]
    Aeq = np.zeros((nz, nv))
    beq = np.zeros(nz)
    for i in range(p):
        r_ = slice(i * d, (i + 1) * d)
        Aeq[r_, zsl(i + 1)] = np.eye(d)
        Aeq[r_, i * l:(i + 1) * l] = -B
        if i == 0:
            beq[r_] = A @ z0
        else:
            Aeq[r_, zsl(i)] = -A
    rows, rhs = [], []
    if spec.budget is not None:
        for i in range(p):
            row = np.zeros(nv)
            row[i * l:(i + 1) * l] = 1.0
            rows.append(row)
            rhs.append(spec.budget)
    if spec.Ehat is not None:
        for i in range(p + 1):
            E = spec.Ehat[i] @ C
            blk = np.zeros((E.shape[0], nv))
            bi = spec.b[i].copy()
            if i == 0:
                bi = bi - E @ z0
            else:
                blk[:, zsl(i)] = E
            if i < p:
                blk[:, i * l:(i + 1) * l] += spec.D[i]
            rows.extend(blk)
            rhs.extend(bi)
    lb = np.r_[np.tile(spec.u_low, p), np.full(nz, -np.inf)]
    ub = np.r_[np.tile(spec.u_high, p), np.full(nz, np.inf)]
    G = np.array(rows).reshape(len(rows), nv)
    return QpProblem(H=H, f=f, G=G, h=np.array(rhs, dtype=float), lb=lb, ub=ub,
                     A_eq=Aeq, b_eq=beq)


def make_limited_budget_spec(n, beta0, u_T, p) -> MpcSpec:
    """Linear cost 1^T x_i, box [0, beta0], per-step budget 1^T u <= u_T."""
    beta0 = np.broadcast_to(np.asarray(beta0, dtype=float), (n,))
    if not (0 < u_T <= beta0.sum() + 1e-12):
        raise ParameterError(f"budget must lie in (0, sum(beta0)], got {u_T}")
    return MpcSpec(p=p, Qhat=np.zeros((p + 1, n, n)), qhat=np.ones((p + 1, n)),
                   R=np.zeros((p, n, n)), r=np.zeros((p, n)), u_low=np.zeros(n),
                   u_high=beta0.copy(), budget=float(u_T), name="limited-budget")


def make_min_cost_spec(n, beta0, p, Q_weight=1.0, q_weight=0.5, R_weight=0.3,
                       r_weight=0.1) -> MpcSpec:
    """Quadratic state cost with input penalties and box [0, beta0], no budget."""
    beta0 = np.broadcast_to(np.asarray(beta0, dtype=float), (n,))
    I = np.eye(n)
    return MpcSpec(p=p, Qhat=np.repeat(Q_weight * I[None], p + 1, axis=0),
                   qhat=np.full((p + 1, n), q_weight),
                   R=np.repeat(R_weight * I[None], p, axis=0), r=np.full((p, n), r_weight),
                   u_low=np.zeros(n), u_high=beta0.copy(), name="min-cost")


@dataclass
class ClosedLoopLog:
    t: list = field(default_factory=list)
    states: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    infected_fraction: list = field(default_factory=list)
    new_infections_cum: list = field(default_factory=list)
    u_total: list = field(default_factory=list)
    qp_iters: list = field(default_factory=list)
    kkt_residual: list = field(default_factory=list)
    stage_cost: list = field(default_factory=list)
    plan_cost: list = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    @property
    def total_new_infections(self) -> int:
        return self.new_infections_cum[-1] if self.new_infections_cum else 0

    def input_matrix(self) -> np.ndarray:
        return np.array(self.inputs)

    def rows(self):
        """CSV rows; the input columns of the final measurement are empty."""
        for k, t in enumerate(self.t):
            applied = k < len(self.inputs)
            yield {
                "t": t,
                "infected_fraction": self.infected_fraction[k],
                "new_infections_cum": self.new_infections_cum[k],
                "u_total": self.u_total[k] if applied else "",
                "qp_iters": self.qp_iters[k] if applied else "",
                "kkt_residual": self.kkt_residual[k] if applied else "",
            }

    def write_csv(self, path, inputs_path=None):
        cols = ["t", "infected_fraction", "new_infections_cum", "u_total", "qp_iters",
                "kkt_residual"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        if inputs_path is not None and self.inputs:
            np.savetxt(inputs_path, self.input_matrix(), fmt="%.17g", delimiter=",")


class MpcAbort(NetctlError):
    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


def _record_measurement(log_, t, x, n_inf):
    log_.t.append(float(t))
    log_.states.append(x.copy())
    log_.infected_fraction.append(float(x.mean()))
    log_.new_infections_cum.append(int(n_inf))


def mpc_closed_loop(g, params, model: KoopmanModel, spec: MpcSpec, x0, steps: int, seed: int,
                    tol: float = 1e-6, warm_start: bool = True) -> ClosedLoopLog:
    """Receding-horizon control of the stochastic plant.

    Each step measures x, solves the condensed QP from z0 = encode(x),
    applies the first input for one model period and advances the plant.
    """
    x = np.asarray(x0).astype(np.uint8)
    seeds = gemf.stream_seeds(seed, steps)
    log_ = ClosedLoopLog()
    _record_measurement(log_, 0.0, x, 0)
    n_inf = 0
    prev = None
    for k in range(steps):
        z0 = model.encode(x.astype(float))
        qp = condense_qp(model, spec, z0)
        hint = None
        if warm_start and prev is not None:
            hint = np.r_[prev[spec.l:], prev[-spec.l:]]
        try:
            ustack, diag = solve_qp(qp, tol=tol, x0=hint)
        except NetctlError as exc:
            log_.status, log_.error = "failed", f"step {k}: {exc}"
            raise MpcAbort(log_.error, log_) from exc
        if diag.status != "optimal":
            log_.status = "failed"
            log_.error = f"step {k}: QP {diag.status}, KKT residual {diag.kkt:.3g}"
            raise MpcAbort(log_.error, log_)
        prev = ustack
        u = np.clip(ustack[:spec.l], spec.u_low, spec.u_high)
        log_.inputs.append(u)
        log_.u_total.append(float(u.sum()))
        log_.qp_iters.append(diag.iterations)
        log_.kkt_residual.append(diag.kkt)
        log_.stage_cost.append(spec.stage_cost(x.astype(float), u, 0))
        log_.plan_cost.append(diag.objective + qp.const)
        x, new = gemf.simulate_trajectory(g, params, x, u, model.T, seeds[k],
                                          return_infections=True)
        n_inf += new
        _record_measurement(log_, (k + 1) * model.T, x, n_inf)
    log_.status = "ok"
    return log_


def fixed_input_run(g, params, u, x0, steps: int, seed: int, T: float = 1.0) -> ClosedLoopLog:
    """Open-loop counterpart: apply the same ``u`` every period.

    Uses the same per-step plant seeds as ``mpc_closed_loop``.
    """
    x = np.asarray(x0).astype(np.uint8)
    u = np.asarray(u, dtype=float)
    seeds = gemf.stream_seeds(seed, steps)
    log_ = ClosedLoopLog()
    _record_measurement(log_, 0.0, x, 0)
    n_inf = 0
    for k in range(steps):
        log_.inputs.append(u)
        log_.u_total.append(float(u.sum()))
        log_.qp_iters.append(0)
        log_.kkt_residual.append(0.0)
        x, new = gemf.simulate_trajectory(g, params, x, u, T, seeds[k], return_infections=True)
        n_inf += new
        _record_measurement(log_, (k + 1) * T, x, n_inf)
    log_.status = "ok"
    return log_


def uniform_allocation(n, u_T, beta0=None) -> np.ndarray:
    u = np.full(n, u_T / n)
    return u if beta0 is None else np.minimum(u, beta0)


def initial_infection(n, fraction, rng) -> np.ndarray:
    """Binary state with exactly round(fraction * n) infected nodes."""
    x = np.zeros(n, dtype=np.uint8)
    x[rng.choice(n, int(round(fraction * n)), replace=False)] = 1
    return x


def save_log(log_, directory, prefix="mpc"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    log_.write_csv(d / f"{prefix}_log.csv", d / f"{prefix}_inputs.csv")
