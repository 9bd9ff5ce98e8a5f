"""Observable dictionary: a constant plus Gaussian radial basis functions.

The RBF centers come from k-means clustering of the training states; the
bandwidth defaults to the median pairwise distance between centers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from netctl.errors import ParameterError, ParseError, ShapeError


def _sq_dists(P, C):
    """Squared distances between rows of ``P`` (m x n) and ``C`` (k x n)."""
    d = (P * P).sum(axis=1)[:, None] - 2.0 * P @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(P, k, rng):
    m = P.shape[0]
    centers = np.empty((k, P.shape[1]))
    centers[0] = P[rng.integers(m)]
    closest = _sq_dists(P, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center
            idx = rng.integers(m)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        centers[c] = P[idx]
        closest = np.minimum(closest, _sq_dists(P, centers[c:c + 1])[:, 0])
    return centers


def _lloyd(P, centers, max_iter, rtol):
    prev = np.inf
    for _ in range(max_iter):
        d = _sq_dists(P, centers)
        labels = d.argmin(axis=1)  # ties go to the lowest index
        inertia = float(d[np.arange(P.shape[0]), labels].sum())
        counts = np.bincount(labels, minlength=centers.shape[0])
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, P)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if prev < np.inf and abs(prev - inertia) <= rtol * max(prev, 1e-300):
            break
        if inertia == 0.0:
            break
        prev = inertia
    d = _sq_dists(P, centers)
    labels = d.argmin(axis=1)
    return centers, float(d[np.arange(P.shape[0]), labels].sum())


def kmeans_centers(points: np.ndarray, k: int, seed: int, n_restarts: int = 3,
                   max_iter: int = 300, rtol: float = 1e-6) -> np.ndarray:
    """Cluster the columns of ``points`` (n x m) and return ``k`` centers (k x n).

    Lloyd iterations from k-means++ seeds; the restart with lowest inertia
    wins.
    """
    P = np.asarray(points, dtype=float).T
    if k < 1:
        raise ParameterError("k must be positive")
    n_distinct = np.unique(P, axis=0).shape[0] if P.size else 0
    if k > n_distinct:
        raise ParameterError(f"k={k} exceeds the {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_restarts):
        centers, inertia = _lloyd(P, _kmeanspp(P, k, rng), max_iter, rtol)
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    return best


def _dict_id(centers, sigma):
    h = hashlib.sha256()
    h.update(np.float64(sigma).tobytes())
    h.update(np.ascontiguousarray(centers, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class Dictionary:
    centers: np.ndarray  # k x n
    sigma: float
    dict_id: str = field(default="")

    def __post_init__(self):
        c = np.array(self.centers, dtype=float)
        if c.ndim != 2 or c.shape[0] == 0:
            raise ParameterError("centers must be a nonempty k x n array")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "dict_id", _dict_id(c, self.sigma))

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def size(self) -> int:
        """Number of observables N = k + 1."""
        return self.k + 1

    @property
    def n(self) -> int:
        return self.centers.shape[1]

    def lift(self, X) -> np.ndarray:
        return lift_states(self, X)

    def __call__(self, x) -> np.ndarray:
        return lift_states(self, np.asarray(x, dtype=float)[:, None])[:, 0]

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "centers": self.centers.tolist(), "dict_id": self.dict_id}

    @classmethod
    def from_dict(cls, data) -> "Dictionary":
        try:
            d = cls(np.asarray(data["centers"], dtype=float), float(data["sigma"]))
        except KeyError as exc:
            raise ParseError(f"{exc.args[0]}: missing field") from exc
        if "dict_id" in data and data["dict_id"] != d.dict_id:
            raise ParseError("dict_id: does not match centers and sigma")
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Dictionary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def median_pairwise_distance(centers) -> float:
    C = np.asarray(centers, dtype=float)
    if C.shape[0] < 2:
        raise ParameterError("median heuristic needs at least two centers")
    iu = np.triu_indices(C.shape[0], k=1)
    return float(np.median(np.sqrt(_sq_dists(C, C)[iu])))


def build_dictionary(centers, sigma="median-heuristic") -> Dictionary:
    centers = np.asarray(centers, dtype=float)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ParameterError("need a nonempty k x n array of centers")
    if isinstance(sigma, str):
        if sigma != "median-heuristic":
            raise ParameterError(f"unknown sigma policy {sigma!r}")
        sigma = median_pairwise_distance(centers)
    return Dictionary(centers, float(sigma))


def lift_states(dictionary: Dictionary, X) -> np.ndarray:
    """Apply psi column-wise: (n x m) states -> (N x m) observables."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != dictionary.n:
        raise ShapeError(f"states must be {dictionary.n} x m, got {X.shape}")
    m = X.shape[1]
    out = np.empty((dictionary.size, m))
    out[0] = 1.0
    if m:
        d2 = _sq_dists(X.T, dictionary.centers).T
        out[1:] = np.exp(-d2 / (2.0 * dictionary.sigma ** 2))
    return out
