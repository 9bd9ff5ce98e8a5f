"""Random graph generation, persistence and spectral analysis.

Graphs are undirected and simple. They are stored as a sorted tuple of
``(i, j)`` pairs with ``i < j``; the dense adjacency matrix is built on
demand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from netctl.errors import DivergenceError, ParameterError, ParseError

MODELS = ("er", "ws", "geo")


@dataclass(frozen=True)
class Graph:
    n: int
    edges: tuple[tuple[int, int], ...]
    model: str = "custom"
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        _check_edges(self.n, self.edges)

    @classmethod
    def from_edges(cls, n, edges, model="custom", params=None, seed=None):
        norm = tuple(sorted((min(int(i), int(j)), max(int(i), int(j))) for i, j in edges))
        return cls(n=int(n), edges=norm, model=model, params=dict(params or {}), seed=seed)

    @cached_property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        if self.edges:
            e = np.asarray(self.edges)
            A[e[:, 0], e[:, 1]] = 1.0
            A[e[:, 1], e[:, 0]] = 1.0
        A.setflags(write=False)
        return A

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor lists in compressed form ``(indptr, indices)``."""
        nbrs = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(v) for v in nbrs])
        indices = np.array([j for v in nbrs for j in sorted(v)], dtype=np.int64)
        return indptr, indices

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def mean_degree(self) -> float:
        return 2.0 * len(self.edges) / self.n

    def relabel(self, perm) -> "Graph":
        """Return the graph with node ``i`` renamed to ``perm[i]``."""
        perm = np.asarray(perm)
        return Graph.from_edges(self.n, [(perm[i], perm[j]) for i, j in self.edges],
                                model=self.model, params=self.params, seed=self.seed)


def _check_edges(n, edges):
    if n < 1:
        raise ParseError(f"n: node count must be positive, got {n}")
    seen = set()
    for e in edges:
        if len(e) != 2:
            raise ParseError(f"edges: malformed edge {list(e)}")
        i, j = e
        if i == j:
            raise ParseError(f"edges: self-loop at node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"edges: endpoint out of range in edge {[i, j]} (n={n})")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ParseError(f"edges: duplicate edge {list(key)}")
        seen.add(key)


def generate(model: str, n: int, target_avg_degree: float, seed: int,
             rewire_p: float | None = None) -> Graph:
    """Sample a random graph with the given expected average degree.

    ``er`` uses edge probability d/(n-1). ``ws`` starts from a ring lattice
    whose (even) degree is nearest to d and rewires each lattice edge with
    probability ``rewire_p``. ``geo`` drops nodes uniformly in the unit
    square and connects pairs closer than sqrt(d / (pi (n-1))); boundary
    effects make the realized degree slightly below target.
    """
    model = model.lower()
    if model not in MODELS:
        raise ParameterError(f"unknown graph model {model!r}; expected one of {MODELS}")
    if n < 2:
        raise ParameterError(f"n must be at least 2, got {n}")
    d = float(target_avg_degree)
    if not (0 < d <= n - 1):
        raise ParameterError(f"target_avg_degree must lie in (0, n-1], got {d}")
    rng = np.random.default_rng(seed)
    params = {"target_avg_degree": d}

    if model == "er":
        p = d / (n - 1)
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < p
        edges = zip(iu[keep].tolist(), ju[keep].tolist())
        params["p"] = p
    elif model == "geo":
        radius = math.sqrt(d / (math.pi * (n - 1)))
        pos = rng.random((n, 2))
        diff = pos[:, None, :] - pos[None, :, :]
        close = np.einsum("ijk,ijk->ij", diff, diff) <= radius * radius
        iu, ju = np.triu_indices(n, k=1)
        keep = close[iu, ju]
        edges = zip(iu[keep].tolist(), ju[keep].tolist())
        params["radius"] = radius
    else:
        if rewire_p is None:
            raise ParameterError("ws graphs need a rewiring probability")
        if not (0.0 <= rewire_p <= 1.0):
            raise ParameterError(f"rewire_p must lie in [0, 1], got {rewire_p}")
        k = max(2, 2 * int(round(d / 2.0)))
        if k >= n:
            raise ParameterError(f"lattice degree {k} too large for n={n}")
        edges = _watts_strogatz(n, k, rewire_p, rng)
        params.update(k=k, rewire_p=float(rewire_p))

    return Graph.from_edges(n, edges, model=model, params=params, seed=seed)


def _watts_strogatz(n, k, p, rng):
    adj = [set() for _ in range(n)]
    for u in range(n):
        for j in range(1, k // 2 + 1):
            v = (u + j) % n
            adj[u].add(v)
            adj[v].add(u)
    for j in range(1, k // 2 + 1):
        for u in range(n):
            v = (u + j) % n
            if rng.random() >= p or v not in adj[u]:
                continue
            if len(adj[u]) >= n - 1:
                continue
            while True:
                w = int(rng.integers(n))
                if w != u and w not in adj[u]:
                    break
            adj[u].discard(v)
            adj[v].discard(u)
            adj[u].add(w)
            adj[w].add(u)
    return [(u, v) for u in range(n) for v in adj[u] if u < v]


def spectral_radius(g: Graph, rtol: float = 1e-9, max_iter: int = 100_000) -> float:
    """Largest adjacency eigenvalue by shifted power iteration.

    The unit shift keeps the Perron root strictly dominant on bipartite
    graphs, where plain power iteration oscillates between +/- lambda.
    """
    if not g.edges:
        return 0.0
    A = g.adjacency
    v = np.ones(g.n) / math.sqrt(g.n)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v + v
        w /= np.linalg.norm(w)
        lam_new = float(w @ (A @ w))
        resid = np.linalg.norm(A @ w - lam_new * w)
        if abs(lam_new - lam) <= rtol * abs(lam_new) and resid <= math.sqrt(rtol) * abs(lam_new):
            return lam_new
        v, lam = w, lam_new
    raise DivergenceError(f"power iteration did not converge in {max_iter} iterations")


def katz_centrality(g: Graph, alpha: float | None = None, beta_k: float = 1.0,
                    tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Solve (I - alpha A^T) c = beta_k 1 by fixed-point iteration.

    ``alpha`` defaults to 0.9 / lambda_1.
    """
    if beta_k <= 0:
        raise ParameterError(f"beta_k must be positive, got {beta_k}")
    lam = spectral_radius(g)
    if alpha is None:
        alpha = 0.9 / lam if lam > 0 else 1.0
    if alpha * lam >= 1.0:
        raise DivergenceError(
            f"Katz series diverges: alpha * lambda_1 = {alpha * lam:.6g} >= 1")
    At = g.adjacency.T
    b = np.full(g.n, float(beta_k))
    c = b.copy()
    for _ in range(max_iter):
        c = b + alpha * (At @ c)
        resid = np.max(np.abs(c - alpha * (At @ c) - b))
        if resid <= tol:
            return c
    raise DivergenceError(f"Katz iteration did not reach residual {tol} in {max_iter} steps")


def graph_to_dict(g: Graph) -> dict:
    return {
        "n": g.n,
        "model": g.model,
        "params": g.params,
        "seed": g.seed,
        "edges": [list(e) for e in g.edges],
    }


def graph_from_dict(data: dict) -> Graph:
    for key in ("n", "edges"):
        if key not in data:
            raise ParseError(f"{key}: missing field")
    n = data["n"]
    if not isinstance(n, int) or isinstance(n, bool):
        raise ParseError(f"n: expected integer, got {n!r}")
    edges = data["edges"]
    if not isinstance(edges, list):
        raise ParseError("edges: expected a list of [i, j] pairs")
    for e in edges:
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            raise ParseError(f"edges: malformed edge {e!r}")
    _check_edges(n, [tuple(e) for e in edges])
    return Graph.from_edges(n, edges, model=data.get("model", "custom"),
                            params=data.get("params") or {}, seed=data.get("seed"))


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g), indent=1, sort_keys=True))


def load_graph(path) -> Graph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"graph file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError("graph file must hold a JSON object")
    return graph_from_dict(data)
