"""Exact stochastic simulation of the controlled networked SIS process.

Every susceptible node ``i`` is infected at rate ``(beta0_i - u_i) * N_i``
where ``N_i`` counts its infected neighbours, and every infected node
recovers at rate ``delta_i``. Trajectories are simulated event by event
(Gillespie's direct method) inside a compiled kernel.

Randomness is split per trajectory: trajectory ``j`` of a call with master
seed ``s`` draws from its own stream seeded by ``SeedSequence([s, j])``, so
results do not depend on execution order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from netctl.errors import ParameterError, ParseError, ShapeError
from netctl.netgraph import Graph

# prefer layers that do not depend on the installed TBB version
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass(frozen=True)
class EpidemicParams:
    beta0: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta0, dtype=float)
        d = np.asarray(self.delta, dtype=float)
        if b.shape != d.shape or b.ndim != 1:
            raise ParameterError("beta0 and delta must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(d))):
            raise ParameterError("epidemic rates must be finite")
        if np.any(b < 0) or np.any(d < 0):
            raise ParameterError("epidemic rates must be nonnegative")
        object.__setattr__(self, "beta0", b)
        object.__setattr__(self, "delta", d)

    @classmethod
    def homogeneous(cls, n, beta0=1.0, delta=2.0):
        return cls(np.full(n, float(beta0)), np.full(n, float(delta)))

    @property
    def n(self):
        return self.beta0.size


def stream_seeds(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Per-trajectory 32-bit seeds split from a master seed by counter."""
    return np.array(
        [np.random.SeedSequence([int(seed), offset + j]).generate_state(1)[0]
         for j in range(count)],
        dtype=np.int64,
    )


@numba.njit(cache=True)
def _gillespie(indptr, indices, beta, delta, x0, t_grid, seed):
    """Run one trajectory, recording the state at each time in ``t_grid``.

    Returns the recorded states (len(t_grid) x n, uint8) and the number of
    S->I transitions up to the last grid time.
    """
    np.random.seed(seed)
    n = x0.size
    x = x0.copy()
    ninf = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if x[i] == 1:
            for k in range(indptr[i], indptr[i + 1]):
                ninf[indices[k]] += 1
    rate = np.empty(n)
    total = 0.0
    for i in range(n):
        rate[i] = delta[i] if x[i] == 1 else beta[i] * ninf[i]
        total += rate[i]

    out = np.empty((t_grid.size, n), dtype=np.uint8)
    n_infections = 0
    t = 0.0
    g = 0
    n_events = 0
    while g < t_grid.size:
        if total < 1e-9:
            total = 0.0
            for k in range(n):
                total += rate[k]
        if total <= 0.0:
            while g < t_grid.size:
                out[g, :] = x
                g += 1
            break
        t_next = t - np.log(1.0 - np.random.random()) / total
        while g < t_grid.size and t_grid[g] < t_next:
            out[g, :] = x
            g += 1
        if g >= t_grid.size:
            break
        t = t_next
        target = np.random.random() * total
        acc = 0.0
        i = n - 1
        for k in range(n):
            acc += rate[k]
            if target < acc and rate[k] > 0.0:
                i = k
                break
        while rate[i] <= 0.0:
            i -= 1
        if x[i] == 1:
            x[i] = 0
            step = -1
            new_rate = beta[i] * ninf[i]
        else:
            x[i] = 1
            step = 1
            n_infections += 1
            new_rate = delta[i]
        total += new_rate - rate[i]
        rate[i] = new_rate
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            ninf[j] += step
            if x[j] == 0:
                r = beta[j] * ninf[j]
                total += r - rate[j]
                rate[j] = r
        n_events += 1
        # refresh the running sum periodically to bound round-off drift
        if n_events % 1024 == 0:
            total = 0.0
            for k in range(n):
                total += rate[k]
    return out, n_infections


@numba.njit(cache=True, parallel=True)
def _batch_final(indptr, indices, beta0, delta, X0, U, duration, seeds):
    # each run reseeds the thread-local generator, so threading is deterministic
    m, n = X0.shape
    Y = np.empty((m, n), dtype=np.uint8)
    grid = np.array([duration])
    for s in numba.prange(m):
        beta = beta0 - U[s]
        out, _ = _gillespie(indptr, indices, beta, delta, X0[s], grid, seeds[s])
        Y[s, :] = out[0]
    return Y


def _effective_beta(params: EpidemicParams, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != params.beta0.shape:
        raise ShapeError(f"control has shape {u.shape}, expected {params.beta0.shape}")
    beta = params.beta0 - u
    if np.any(beta < -1e-12) or np.any(u < -1e-12):
        raise ParameterError("control must satisfy 0 <= u <= beta0")
    return np.clip(beta, 0.0, None)


def _check_state(x, n):
    x = np.asarray(x)
    if x.shape != (n,):
        raise ShapeError(f"state has shape {x.shape}, expected ({n},)")
    if not np.all((x == 0) | (x == 1)):
        raise ParameterError("network state must be binary")
    return x.astype(np.uint8)


def simulate_path(g: Graph, params: EpidemicParams, x0, u, t_grid, seed: int):
    """States at each time of ``t_grid`` and the S->I count up to its end."""
    if params.n != g.n:
        raise ShapeError("epidemic parameters do not match the graph size")
    x0 = _check_state(x0, g.n)
    beta = _effective_beta(params, u)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ParameterError("t_grid must be a nonempty increasing array of times >= 0")
    indptr, indices = g.csr
    return _gillespie(indptr, indices, beta, params.delta, x0, t_grid, np.int64(seed))


def simulate_trajectory(g: Graph, params: EpidemicParams, x0, u, duration: float,
                        seed: int, return_infections: bool = False):
    """Network state at ``t = duration`` starting from ``x0`` under constant ``u``."""
    if duration <= 0:
        raise ParameterError(f"duration must be positive, got {duration}")
    out, n_inf = simulate_path(g, params, x0, u, [duration], seed)
    if return_infections:
        return out[0], n_inf
    return out[0]


def set_threads(k: int | None) -> None:
    """Cap the worker threads used by batch simulation."""
    if k is not None:
        if k < 1:
            raise ParameterError("thread count must be positive")
        numba.set_num_threads(min(int(k), numba.config.NUMBA_NUM_THREADS))


def simulate_batch(g: Graph, params: EpidemicParams, X0, U, duration: float,
                   seeds) -> np.ndarray:
    """Final states for many (x0, u) pairs; rows of ``X0``/``U`` are runs."""
    X0 = np.ascontiguousarray(X0, dtype=np.uint8)
    U = np.ascontiguousarray(U, dtype=float)
    if X0.ndim != 2 or X0.shape[1] != g.n or U.shape != X0.shape:
        raise ShapeError("X0 and U must both be (runs, n)")
    if np.any(U < -1e-12) or np.any(U > params.beta0 + 1e-12):
        raise ParameterError("control must satisfy 0 <= u <= beta0")
    if duration <= 0:
        raise ParameterError(f"duration must be positive, got {duration}")
    U = np.minimum(np.clip(U, 0.0, None), params.beta0)
    indptr, indices = g.csr
    seeds = np.asarray(seeds, dtype=np.int64)
    return _batch_final(indptr, indices, params.beta0, params.delta, X0, U,
                        float(duration), seeds)


def expected_lift(g, params, x0, u, duration, n_sim, dictionary, seed):
    """Mean of the lifted successor state over ``n_sim`` independent runs."""
    if n_sim < 1:
        raise ParameterError("n_sim must be at least 1")
    x0 = _check_state(x0, g.n)
    seeds = stream_seeds(seed, n_sim)
    X0 = np.repeat(x0[None, :], n_sim, axis=0)
    U = np.repeat(np.asarray(u, dtype=float)[None, :], n_sim, axis=0)
    Y = simulate_batch(g, params, X0, U, duration, seeds)
    acc = np.zeros(dictionary.size)
    for j in range(n_sim):
        acc = acc + dictionary.lift(Y[j][:, None])[:, 0]
    return acc / n_sim


def sample_initial_states(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Binary states with a uniformly drawn infection density per state.

    Each state first draws rho ~ U(0, 1), then infects every node
    independently with probability rho. Returned as (count, n) uint8.
    """
    rho = rng.random(count)
    return (rng.random((count, n)) < rho[:, None]).astype(np.uint8)


def draw_snapshot_inputs(n, n_traj, u_low, u_high, seed):
    """Initial states and inputs of a dataset, as (n, m) column matrices.

    Depends only on the arguments, so the dictionary can be fit to X before
    the expensive ensemble simulation runs.
    """
    if n_traj < 1:
        raise ParameterError("n_traj must be at least 1")
    u_low = np.broadcast_to(np.asarray(u_low, dtype=float), (n,))
    u_high = np.broadcast_to(np.asarray(u_high, dtype=float), (n,))
    if np.any(u_low > u_high):
        raise ParameterError("u_low must not exceed u_high")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5eed]))
    X = sample_initial_states(n, n_traj, rng)
    U = u_low + (u_high - u_low) * rng.random((n_traj, n))
    return X.T.copy(), U.T.copy()


def simulate_successors(g, params, X, U, n_sim, duration, seed):
    """Raw successor states, shape (n_sim, n, m), uint8.

    Run ``j`` of snapshot ``i`` uses stream ``i * n_sim + j`` of ``seed``.
    """
    n, m = X.shape
    seeds = stream_seeds(seed, m * n_sim, offset=1).reshape(m, n_sim)
    X0 = np.repeat(X.T, n_sim, axis=0)
    U0 = np.repeat(U.T, n_sim, axis=0)
    Y = simulate_batch(g, params, X0, U0, duration, seeds.reshape(-1))
    return Y.reshape(m, n_sim, n).transpose(1, 2, 0)


def average_lift(dictionary, Ysamples, chunk: int = 4096) -> np.ndarray:
    """Ensemble mean of lifted successors, accumulated in run order."""
    n_sim, n, m = Ysamples.shape
    out = np.zeros((dictionary.size, m))
    for start in range(0, m, chunk):
        sl = slice(start, min(m, start + chunk))
        acc = np.zeros((dictionary.size, sl.stop - sl.start))
        for j in range(n_sim):
            acc = acc + dictionary.lift(Ysamples[j][:, sl])
        out[:, sl] = acc / n_sim
    return out


@dataclass
class SnapshotDataset:
    X: np.ndarray
    U: np.ndarray
    EPsiY: np.ndarray
    dict_id: str
    T: float
    n_sim: int
    seed: int | None = None

    def __post_init__(self):
        m = self.X.shape[1]
        if self.U.shape[1] != m or self.EPsiY.shape[1] != m:
            raise ShapeError("X, U and EPsiY must have the same number of columns")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.X.shape[1]

    @property
    def N(self):
        return self.EPsiY.shape[0]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.savetxt(d / "X.csv", self.X.T, fmt="%.17g", delimiter=",")
        np.savetxt(d / "U.csv", self.U.T, fmt="%.17g", delimiter=",")
        np.savetxt(d / "EPsiY.csv", self.EPsiY.T, fmt="%.17g", delimiter=",")
        manifest = {"n": self.n, "m": self.m, "N": self.N, "T": self.T,
                    "n_sim": self.n_sim, "dict_id": self.dict_id, "seed": self.seed}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "SnapshotDataset":
        d = Path(directory)
        try:
            man = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"manifest.json: {exc}") from exc

        def read(name, rows):
            a = np.loadtxt(d / name, delimiter=",", ndmin=2)
            if man["m"] == 0:
                return np.zeros((rows, 0))
            if a.shape != (man["m"], rows):
                raise ParseError(f"{name}: expected {man['m']}x{rows}, got {a.shape}")
            return a.T.copy()

        X = read("X.csv", man["n"])
        return cls(X=X, U=read("U.csv", man["n"]), EPsiY=read("EPsiY.csv", man["N"]),
                   dict_id=man["dict_id"], T=man["T"], n_sim=man["n_sim"], seed=man.get("seed"))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.X, self.U, self.EPsiY):
            h.update(np.ascontiguousarray(a, dtype=float).tobytes())
        return h.hexdigest()


def collect_dataset(g, params, dictionary, n_traj, n_sim, duration, u_low, u_high,
                    seed, return_samples=False):
    """Snapshot data (X, U, E[psi(Y)]) from independent ensemble runs."""
    if n_sim < 1:
        raise ParameterError("n_sim must be at least 1")
    u_low = np.broadcast_to(np.asarray(u_low, dtype=float), (g.n,))
    u_high = np.broadcast_to(np.asarray(u_high, dtype=float), (g.n,))
    if np.any(u_low < 0) or np.any(u_high > params.beta0 + 1e-12):
        raise ParameterError("input range must lie within [0, beta0]")
    X, U = draw_snapshot_inputs(g.n, n_traj, u_low, u_high, seed)
    Ys = simulate_successors(g, params, X, U, n_sim, duration, seed)
    ds = SnapshotDataset(X=X.astype(float), U=U, EPsiY=average_lift(dictionary, Ys),
                         dict_id=dictionary.dict_id, T=float(duration), n_sim=int(n_sim),
                         seed=seed)
    if return_samples:
        return ds, Ys
    return ds


def ensemble_fraction_curve(g, params, x0, u, t_grid, n_runs, seed) -> np.ndarray:
    """Mean infected fraction at each time of ``t_grid`` over ``n_runs`` runs."""
    t_grid = np.asarray(t_grid, dtype=float)
    x0 = _check_state(x0, g.n)
    seeds = stream_seeds(seed, n_runs)
    infected = np.zeros(t_grid.size, dtype=np.int64)
    for j in range(n_runs):
        out, _ = simulate_path(g, params, x0, u, t_grid, seeds[j])
        infected += out.sum(axis=1, dtype=np.int64)
    return infected / (n_runs * g.n)


def ensemble_node_probability(g, params, x0, u, duration, n_runs, seed) -> np.ndarray:
    """Empirical per-node infection probability at ``duration``."""
    seeds = stream_seeds(seed, n_runs)
    x0 = _check_state(x0, g.n)
    X0 = np.repeat(x0[None, :], n_runs, axis=0)
    U = np.repeat(np.asarray(u, dtype=float)[None, :], n_runs, axis=0)
    return simulate_batch(g, params, X0, U, duration, seeds).mean(axis=0)


def ensemble_fraction_schedule(g, params, x0, U_seq, T, n_runs, seed) -> np.ndarray:
    """Mean infected fraction after each period of a piecewise-constant input.

    ``U_seq`` is (steps, n); input ``k`` is held during ``[kT, (k+1)T)``.
    Returns ``steps + 1`` values starting with the fraction of ``x0``.
    """
    x0 = _check_state(x0, g.n)
    U_seq = np.asarray(U_seq, dtype=float)
    if U_seq.ndim != 2 or U_seq.shape[1] != g.n:
        raise ShapeError(f"U_seq must be (steps, {g.n}), got {U_seq.shape}")
    if n_runs < 1:
        raise ParameterError("n_runs must be at least 1")
    X = np.repeat(x0[None, :], n_runs, axis=0)
    out = [float(x0.mean())]
    for k, u in enumerate(U_seq):
        seeds = stream_seeds(seed, n_runs, offset=k * n_runs)
        X = simulate_batch(g, params, X, np.repeat(u[None, :], n_runs, axis=0), T, seeds)
        out.append(float(X.mean()))
    return np.array(out)
