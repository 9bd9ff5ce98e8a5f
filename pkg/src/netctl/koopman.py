"""EDMD-with-control identification, reduction and multi-step prediction.

A fitted model is the linear predictor

    z[k+1] = A z[k] + B u[k],    x_hat[k] = C z[k],

started from ``z[0] = psi(x0)`` (full variant) or ``z[0] = P psi(x0)`` with
an orthonormal projection ``P`` (reduced variant).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from netctl import gemf
from netctl.errors import FitError, ParameterError, ParseError, ShapeError
from netctl.lifting import Dictionary, lift_states


@dataclass(frozen=True)
class KoopmanModel:
    variant: str
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dictionary: Dictionary
    encoder: np.ndarray | None = None
    T: float = 1.0

    def __post_init__(self):
        if self.variant not in ("full", "reduced"):
            raise ParameterError(f"unknown model variant {self.variant!r}")
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape[0] != d or self.C.shape[1] != d:
            raise ShapeError("inconsistent A, B, C shapes")
        N = self.dictionary.size
        if self.variant == "full":
            if self.encoder is not None or d != N:
                raise ShapeError("full models act on the whole lifted state")
        elif self.encoder is None or self.encoder.shape != (d, N):
            raise ShapeError("reduced models need an r x N encoder")

    @property
    def dict_id(self) -> str:
        return self.dictionary.dict_id

    @property
    def dims(self) -> dict:
        return {"n": self.C.shape[0], "l": self.B.shape[1], "N": self.dictionary.size,
                "r": self.A.shape[0]}

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def encode(self, x) -> np.ndarray:
        """Initial model state for a network state (or n x m batch)."""
        x = np.asarray(x, dtype=float)
        col = x.ndim == 1
        psi = lift_states(self.dictionary, x[:, None] if col else x)
        z = psi if self.encoder is None else self.encoder @ psi
        return z[:, 0] if col else z

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "dims": self.dims,
            "dict_id": self.dict_id,
            "T": self.T,
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "encoder": None if self.encoder is None else self.encoder.tolist(),
            "dictionary": self.dictionary.to_dict(),
        }

    @classmethod
    def from_dict(cls, data) -> "KoopmanModel":
        try:
            dictionary = Dictionary.from_dict(data["dictionary"])
            enc = data["encoder"]
            model = cls(
                variant=data["variant"],
                A=np.array(data["A"], dtype=float, ndmin=2),
                B=np.array(data["B"], dtype=float, ndmin=2),
                C=np.array(data["C"], dtype=float, ndmin=2),
                dictionary=dictionary,
                encoder=None if enc is None else np.array(enc, dtype=float, ndmin=2),
                T=float(data.get("T", 1.0)),
            )
        except KeyError as exc:
            raise ParseError(f"{exc.args[0]}: missing field") from exc
        if data.get("dict_id", model.dict_id) != model.dict_id:
            raise ParseError("dict_id: does not match the embedded dictionary")
        return model

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FitReport:
    residual_AB: float
    residual_C: float
    rank_regressor: int
    rank_successor: int
    singular_values_regressor: np.ndarray = field(repr=False)
    singular_values_successor: np.ndarray = field(repr=False)
    ridge_AB: float = 0.0
    ridge_C: float = 0.0

    def to_dict(self) -> dict:
        return {
            "residual_AB": self.residual_AB,
            "residual_C": self.residual_C,
            "rank_regressor": self.rank_regressor,
            "rank_successor": self.rank_successor,
            "singular_values_regressor": self.singular_values_regressor.tolist(),
            "singular_values_successor": self.singular_values_successor.tolist(),
            "ridge_AB": self.ridge_AB,
            "ridge_C": self.ridge_C,
        }


def ridge_lstsq(Z, Y, rel_ridge=1e-8, refine=2):
    """Solve min_W ||Y - W Z||_F through the normal equations.

    The Gram matrix is shifted by ``rel_ridge * mean(diag(Z Z^T))`` for a
    stable Cholesky factorization. ``refine`` rounds of iterated Tikhonov
    then strip the shift's bias along well-determined directions while
    keeping near-null directions damped. Returns ``(W, ridge)``.
    """
    G = Z @ Z.T
    scale = float(np.mean(np.diag(G))) if G.size else 0.0
    if not scale > 0:
        raise FitError("degenerate regressor: all-zero data")
    lam = rel_ridge * scale
    YZt = Y @ Z.T
    factor = scipy.linalg.cho_factor(G + lam * np.eye(G.shape[0]))
    W = scipy.linalg.cho_solve(factor, YZt.T).T
    for _ in range(refine):
        W = W + scipy.linalg.cho_solve(factor, (YZt - W @ G).T).T
    return W, lam


def _rel(num, den):
    d = np.linalg.norm(den)
    return float(np.linalg.norm(num) / d) if d > 0 else float(np.linalg.norm(num))


def _numerical_rank(s, rtol):
    return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0


def _check_data(data):
    if data.EPsiY.shape[0] < 1 or data.m < 1:
        raise FitError("empty dataset")
    if not np.any(data.EPsiY) and not np.any(data.U):
        raise FitError("degenerate regressor: all-zero data")


def _fit_C(data, psiX, rel_ridge, refine):
    if not np.any(data.X):
        return np.zeros((data.n, psiX.shape[0])), 0.0
    return ridge_lstsq(psiX, data.X, rel_ridge, refine)


def fit_full(data, dictionary: Dictionary, rel_ridge: float = 1e-8, refine: int = 2,
             svd_rtol: float = 1e-10):
    """Least-squares fit of A, B (one-step lifted dynamics) and C (decoder)."""
    _check_data(data)
    if dictionary.dict_id != data.dict_id:
        raise ShapeError("dataset was lifted with a different dictionary")
    N, l = dictionary.size, data.U.shape[0]
    if data.m < N + l:
        warnings.warn(f"underdetermined fit: m={data.m} < N + l = {N + l}", stacklevel=2)
    psiX = lift_states(dictionary, data.X)
    Z = np.vstack([psiX, data.U])
    AB, lam = ridge_lstsq(Z, data.EPsiY, rel_ridge, refine)
    A, B = AB[:, :N], AB[:, N:]
    C, lam_c = _fit_C(data, psiX, rel_ridge, refine)

    s1 = np.linalg.svd(Z, compute_uv=False)
    s2 = np.linalg.svd(data.EPsiY, compute_uv=False)
    report = FitReport(
        residual_AB=_rel(data.EPsiY - AB @ Z, data.EPsiY),
        residual_C=_rel(data.X - C @ psiX, data.X),
        rank_regressor=_numerical_rank(s1, svd_rtol),
        rank_successor=_numerical_rank(s2, svd_rtol),
        singular_values_regressor=s1,
        singular_values_successor=s2,
        ridge_AB=lam,
        ridge_C=lam_c,
    )
    model = KoopmanModel("full", A, B, C, dictionary, None, data.T)
    return model, report


def fit_reduced(data, dictionary: Dictionary, r: int, svd_rtol: float = 1e-10,
                rel_ridge: float = 1e-8, refine: int = 2):
    """Order-``r`` model from the twin SVDs of the regressor and successor data.

    With ``[Psi(X); U] = U1 S1 V1^T`` split at row N into ``U11`` and ``U12``
    and ``E[Psi(Y)] = U2 S2 V2^T`` truncated to r columns:

        A_r = U2^T E[Psi(Y)] V1 S1^-1 U11^T U2
        B_r = U2^T E[Psi(Y)] V1 S1^-1 U12^T
        C_r = C U2

    Singular values of the regressor below ``svd_rtol * s_max`` are dropped.
    """
    _check_data(data)
    if dictionary.dict_id != data.dict_id:
        raise ShapeError("dataset was lifted with a different dictionary")
    N = dictionary.size
    if not (1 <= r <= min(N, data.m)):
        raise ParameterError(f"r must lie in [1, {min(N, data.m)}], got {r}")
    psiX = lift_states(dictionary, data.X)
    Z = np.vstack([psiX, data.U])
    U1, s1, V1t = np.linalg.svd(Z, full_matrices=False)
    q = _numerical_rank(s1, svd_rtol)
    if q == 0:
        raise FitError("degenerate regressor: all-zero data")
    U1, s1k, V1t = U1[:, :q], s1[:q], V1t[:q]
    U11, U12 = U1[:N], U1[N:]
    U2, s2, _ = np.linalg.svd(data.EPsiY, full_matrices=False)
    U2r = U2[:, :r]

    core = (U2r.T @ data.EPsiY) @ V1t.T / s1k  # r x q
    A = core @ (U11.T @ U2r)
    B = core @ U12.T
    C_full, lam_c = _fit_C(data, psiX, rel_ridge, refine)
    C = C_full @ U2r

    zX = U2r.T @ psiX
    zY = U2r.T @ data.EPsiY
    report = FitReport(
        residual_AB=_rel(zY - A @ zX - B @ data.U, zY),
        residual_C=_rel(data.X - C_full @ psiX, data.X),
        rank_regressor=q,
        rank_successor=_numerical_rank(s2, svd_rtol),
        singular_values_regressor=s1,
        singular_values_successor=s2[:r],
        ridge_AB=0.0,
        ridge_C=lam_c,
    )
    model = KoopmanModel("reduced", A, B, C, dictionary, U2r.T.copy(), data.T)
    return model, report


def rollout(model: KoopmanModel, z0, u_seq, steps: int) -> np.ndarray:
    """Lifted states z_1..z_steps (steps x order) from ``z0``."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, model.B.shape[1]) if steps else u_seq
    if steps and len(u_seq) < steps:
        raise ShapeError(f"need {steps} inputs, got {len(u_seq)}")
    z = np.asarray(z0, dtype=float)
    if z.shape != (model.order,):
        raise ShapeError(f"z0 has shape {z.shape}, expected ({model.order},)")
    out = np.empty((steps, model.order))
    for k in range(steps):
        z = model.A @ z + model.B @ u_seq[k]
        out[k] = z
    return out


def predict_expected(model: KoopmanModel, x0, u_seq, steps: int, clip: bool = False,
                     z0=None) -> np.ndarray:
    """Predicted expected states x_hat_1..x_hat_steps, shape (steps, n).

    Raw (unclipped) values by default; ``clip=True`` clamps into [0, 1] for
    display.
    """
    if steps < 0:
        raise ParameterError("steps must be nonnegative")
    n = model.C.shape[0]
    if steps == 0:
        return np.empty((0, n))
    if z0 is None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (model.dictionary.n,):
            raise ShapeError(f"x0 has shape {x0.shape}, expected ({model.dictionary.n},)")
        z0 = model.encode(x0)
    X = rollout(model, z0, u_seq, steps) @ model.C.T
    return np.clip(X, 0.0, 1.0) if clip else X


def koopman_spectrum(model: KoopmanModel):
    """Eigenvalues of A by decreasing modulus and the matching modes C v."""
    lam, V = np.linalg.eig(model.A)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam, V = lam[order], V[:, order]
    return lam, model.C @ V


@dataclass
class TestSet:
    X0: np.ndarray     # n x count initial states
    U: np.ndarray      # n x count inputs
    Xbar: np.ndarray   # n x count empirical infection probabilities
    duration: float
    n_ref: int


def make_test_set(g, params, count, u_policy, duration, n_ref, seed) -> TestSet:
    """Random initial conditions with ensemble reference outcomes.

    Initial states are drawn as in dataset collection. ``u_policy`` is a
    length-n vector, a ``(u_low, u_high)`` box to sample from, or a callable
    ``rng -> u``.
    """
    if count < 1:
        raise ParameterError("need at least one test condition")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7e57]))
    X0 = gemf.sample_initial_states(g.n, count, rng)
    U = np.empty((count, g.n))
    for i in range(count):
        if callable(u_policy):
            U[i] = u_policy(rng)
        elif isinstance(u_policy, tuple):
            lo = np.broadcast_to(np.asarray(u_policy[0], dtype=float), (g.n,))
            hi = np.broadcast_to(np.asarray(u_policy[1], dtype=float), (g.n,))
            U[i] = lo + (hi - lo) * rng.random(g.n)
        else:
            U[i] = np.broadcast_to(np.asarray(u_policy, dtype=float), (g.n,))
    seeds = gemf.stream_seeds(seed, count * n_ref, offset=1)
    Y = gemf.simulate_batch(g, params, np.repeat(X0, n_ref, axis=0),
                            np.repeat(U, n_ref, axis=0), duration, seeds)
    Xbar = Y.reshape(count, n_ref, g.n).mean(axis=1)
    return TestSet(X0.T.astype(float), U.T, Xbar.T, float(duration), int(n_ref))


@dataclass
class ErrorSummary:
    mean: float
    median: float
    per_condition: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median,
                "per_condition": self.per_condition.tolist()}


def condition_errors(Xhat, Xbar, eps) -> np.ndarray:
    """Per-column total absolute deviation over total reference infection."""
    return np.abs(Xhat - Xbar).sum(axis=0) / np.maximum(Xbar.sum(axis=0), eps)


def relative_error(model: KoopmanModel, g=None, params=None, test_seeds: int = 1000,
                   u_policy=None, duration: float = 1.0, n_ref: int = 100, seed: int = 0,
                   eps: float = 1.0, test_set: TestSet | None = None) -> ErrorSummary:
    """Prediction error against ensemble references after ``duration``.

    Pass a prebuilt ``test_set`` to score several models on the same
    references.
    """
    if test_set is None:
        test_set = make_test_set(g, params, test_seeds, u_policy, duration, n_ref, seed)
    steps = max(1, int(round(test_set.duration / model.T)))
    Z = model.encode(test_set.X0)
    for _ in range(steps):
        Z = model.A @ Z + model.B @ test_set.U
    Xhat = model.C @ Z
    errs = condition_errors(Xhat, test_set.Xbar, eps)
    return ErrorSummary(float(errs.mean()), float(np.median(errs)), errs)
