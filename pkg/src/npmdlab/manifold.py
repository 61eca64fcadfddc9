"""Embedded manifold nets, graph geodesics and (approximate) Lipschitz calculus.

A manifold is carried as a finite epsilon-net of points in R^D. Geodesic
distances are shortest paths in the graph that joins net points closer than
``edge_radius`` with Euclidean edge weights.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import cKDTree

MAX_NET_POINTS = 4096
_CHUNK = 512


class DisconnectedGraphError(ValueError):
    pass


class ExponentMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LipschitzWitness:
    """Constants (L, alpha, eps) certifying |f(x)-f(y)| <= L d^alpha + 2 eps."""

    constant_L: float
    exponent_alpha: float = 1.0
    proximity_eps: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.exponent_alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.exponent_alpha}")
        if self.constant_L < 0 or self.proximity_eps < 0:
            raise ValueError("L and eps must be nonnegative")


@dataclass
class EmbeddedManifold:
    points: np.ndarray
    intrinsic_dim: int
    edge_radius: float | None = None
    bound_B: float | None = None
    _dist: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("a net needs at least two points in R^D")
        if pts.shape[0] > MAX_NET_POINTS:
            raise ValueError(f"net has {pts.shape[0]} points; cap is {MAX_NET_POINTS}")
        if not 1 <= self.intrinsic_dim <= pts.shape[1]:
            raise ValueError("need 1 <= d <= D")
        self.points = pts
        tree = cKDTree(pts)
        nn, _ = tree.query(pts, k=2)
        spacing = float(nn[:, 1].max())
        if self.edge_radius is None:
            self.edge_radius = 3.0 * spacing
        if self.edge_radius <= 0:
            raise ValueError("edge_radius must be positive")
        if np.any(nn[:, 1] > self.edge_radius):
            raise DisconnectedGraphError("some net point has no neighbor within edge_radius")
        sup = float(np.abs(pts).max())
        if self.bound_B is None:
            self.bound_B = sup
        if sup > self.bound_B + 1e-12:
            raise ValueError(f"net coordinates exceed B={self.bound_B}")

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def adjacency(self) -> csr_matrix:
        tree = cKDTree(self.points)
        pairs = tree.query_pairs(self.edge_radius, output_type="ndarray")
        w = np.linalg.norm(self.points[pairs[:, 0]] - self.points[pairs[:, 1]], axis=1)
        # coincident points still need an edge; csgraph treats explicit 0 as absent
        w = np.maximum(w, 1e-300)
        n = self.n_points
        return csr_matrix((w, (pairs[:, 0], pairs[:, 1])), shape=(n, n))

    def distance_matrix(self) -> np.ndarray:
        """All-pairs graph geodesic distances (cached)."""
        if self._dist is None:
            d = shortest_path(self.adjacency(), method="D", directed=False)
            if not np.all(np.isfinite(d)):
                raise DisconnectedGraphError("the epsilon-net graph is disconnected")
            d[d < 1e-200] = 0.0
            self._dist = d
        return self._dist


def geodesic_distance(m: EmbeddedManifold, x: int, y: int) -> float:
    """Shortest-path length between net points ``x`` and ``y`` (indices)."""
    n = m.n_points
    if not (0 <= x < n and 0 <= y < n):
        raise IndexError("net point index out of range")
    return float(m.distance_matrix()[x, y])


def _as_values(m: EmbeddedManifold, f) -> np.ndarray:
    if callable(f):
        vals = np.array([f(p) for p in m.points], dtype=float)
    else:
        vals = np.asarray(f, dtype=float)
    if vals.shape != (m.n_points,):
        raise ValueError(f"f must give one value per net point, got shape {vals.shape}")
    return vals


def lipschitz_ratio_max(values: np.ndarray, dist: np.ndarray, alpha: float, eps: float) -> float:
    """max_{x != y} (|f(x)-f(y)| - 2 eps)_+ / dist(x,y)^alpha over a distance matrix.

    Coincident points with a positive excess give ``inf``.
    """
    n = values.shape[0]
    best = 0.0
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        diff = np.abs(values[start:stop, None] - values[None, :]) - 2.0 * eps
        np.maximum(diff, 0.0, out=diff)
        dd = dist[start:stop] ** alpha
        idx = np.arange(start, stop)
        diff[idx - start, idx] = 0.0
        if np.any((dd == 0.0) & (diff > 0.0)):
            return float("inf")
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(diff > 0.0, diff / np.where(dd == 0.0, 1.0, dd), 0.0)
        best = max(best, float(r.max()))
    return best


def estimate_lipschitz(m: EmbeddedManifold, f, alpha: float = 1.0, eps: float = 0.0) -> float:
    """Smallest L making ``f`` (L, alpha, eps)-approximately Lipschitz on the net."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return lipschitz_ratio_max(_as_values(m, f), m.distance_matrix(), alpha, eps)


def lipschitz_envelope(m: EmbeddedManifold, f, L: float, alpha: float = 1.0) -> np.ndarray:
    """Inf-convolution min_y {f(y) + L d^alpha(y, x)} truncated below at -||f||_inf."""
    if L < 0:
        raise ValueError("L must be nonnegative")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    vals = _as_values(m, f)
    dist = m.distance_matrix()
    n = vals.shape[0]
    out = np.empty(n)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        out[start:stop] = np.min(vals[:, None] + L * dist[:, start:stop] ** alpha, axis=0)
    return np.maximum(out, -np.abs(vals).max())


def sum_approx_lipschitz(w1: LipschitzWitness, w2: LipschitzWitness, c: float = 1.0) -> LipschitzWitness:
    """Witness for f + c*g given witnesses for f and g."""
    if w1.exponent_alpha != w2.exponent_alpha:
        raise ExponentMismatchError(
            f"cannot add witnesses with alpha {w1.exponent_alpha} and {w2.exponent_alpha}"
        )
    return LipschitzWitness(
        w1.constant_L + abs(c) * w2.constant_L,
        w1.exponent_alpha,
        w1.proximity_eps + abs(c) * w2.proximity_eps,
    )


def random_isometry(D: int, d: int, seed: int = 0) -> np.ndarray:
    """D x d matrix with orthonormal columns drawn from a seeded Gaussian."""
    if D < d:
        raise ValueError("cannot embed isometrically into fewer dimensions")
    g = np.random.default_rng(seed).standard_normal((D, d))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def circle_angles(n: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n) / n


def circle_net(n: int, edge_radius: float | None = None) -> EmbeddedManifold:
    """Uniform n-point net on the unit circle in R^2."""
    t = circle_angles(n)
    return EmbeddedManifold(np.column_stack([np.cos(t), np.sin(t)]), 1, edge_radius)


def embedded_circle_net(n: int, D: int | None = None, seed: int = 0,
                        edge_radius: float | None = None) -> EmbeddedManifold:
    """Unit circle net mapped into R^D by a seeded linear isometry.

    ``D=None`` keeps the native planar coordinates.
    """
    base = circle_net(n, edge_radius)
    if D is None:
        return base
    pts = base.points @ random_isometry(D, 2, seed).T
    return EmbeddedManifold(pts, 1, edge_radius)


def load_net(path, intrinsic_dim: int, edge_radius: float | None = None) -> EmbeddedManifold:
    """Read D coordinates per line, separated by whitespace and/or commas."""
    with open(path) as fh:
        text = re.sub(r"[,;]", " ", fh.read())
    pts = np.loadtxt(io.StringIO(text), ndmin=2)
    return EmbeddedManifold(pts, intrinsic_dim, edge_radius)


def save_net(m: EmbeddedManifold, path) -> None:
    np.savetxt(path, m.points, delimiter=",", fmt="%.17g")
