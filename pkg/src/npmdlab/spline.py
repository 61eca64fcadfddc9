"""First-order (sawtooth) B-spline interpolation on [0,1]^d and an empirical rate check.

M_{p,j}(x) = prod_k psi(2^p x_k - j_k) with psi the hat on [0, 2] peaking at 1.
With coefficients c_j = f(2^-p (j + 1)) the spline sum interpolates f on the
dyadic grid, and for an (L, alpha)-Lipschitz f vanishing at the boundary the
sup error is at most 2 L d N^(-alpha/d) with N = 2^(p d).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

CSV_FIELDS = ["p", "N", "L", "alpha", "sup_error", "bound", "pass"]


def psi(t):
    t = np.asarray(t, dtype=float)
    return np.where((t >= 0) & (t <= 1), t, np.where((t > 1) & (t <= 2), 2.0 - t, 0.0))


def bspline_eval(p: int, j, x) -> float:
    j = np.asarray(j, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(j < 0) or np.any(j > 2 ** p - 1):
        raise ValueError(f"shift {j} outside {{0..{2 ** p - 1}}}^d")
    return float(np.prod(psi(2.0 ** p * x - j)))


@dataclass
class SplineApprox:
    level_p: int
    dim_d: int
    coeffs: np.ndarray  # shape (2^p,) * d, indexed by the shift vector j

    @property
    def N(self) -> int:
        return 2 ** (self.level_p * self.dim_d)

    def __call__(self, X) -> np.ndarray:
        """Evaluate sum_j c_j M_{p,j} at the rows of X (each in [0,1]^d)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim_d:
            raise ValueError(f"points must have {self.dim_d} coordinates")
        n = 2 ** self.level_p
        T = n * X
        base = np.floor(T).astype(int) - 1
        out = np.zeros(len(X))
        # only shifts j with 2^p x - j in (0, 2) can be nonzero: two per axis
        for offs in itertools.product((0, 1), repeat=self.dim_d):
            J = base + np.array(offs)
            ok = np.all((J >= 0) & (J < n), axis=1)
            w = np.prod(psi(T - J), axis=1)
            Jc = np.clip(J, 0, n - 1)
            out += np.where(ok, w * self.coeffs[tuple(Jc.T)], 0.0)
        return out


def grid_points(p: int, d: int) -> np.ndarray:
    """G(p) = {2^-p (j + 1) : j in {0..2^p-1}^d}, in C order of j."""
    ax = (np.arange(2 ** p) + 1.0) / 2 ** p
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def fit_spline(f: Callable[[np.ndarray], np.ndarray], p: int, d: int) -> SplineApprox:
    """Coefficients are the values of f at the grid points 2^-p (j + 1)."""
    if p < 1 or d < 1:
        raise ValueError("need p >= 1 and d >= 1")
    vals = np.asarray(f(grid_points(p, d)), dtype=float)
    return SplineApprox(p, d, vals.reshape((2 ** p,) * d))


def dense_grid(d: int, per_axis: int) -> np.ndarray:
    ax = np.linspace(0.0, 1.0, per_axis)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


# --- test functions ----------------------------------------------------------------

@dataclass
class TestFunction:
    __test__ = False  # not a pytest class despite the name
    f: Callable[[np.ndarray], np.ndarray]
    L: float
    alpha: float
    d: int
    name: str = ""


def brute_force_lipschitz(f, d: int, alpha: float = 1.0, per_axis: int | None = None, chunk: int = 1024) -> float:
    """max |f(x) - f(y)| / |x - y|^alpha over all pairs of a uniform grid (Euclidean metric)."""
    per_axis = per_axis or (1025 if d == 1 else 65)
    pts = dense_grid(d, per_axis)
    v = np.asarray(f(pts), dtype=float)
    best = 0.0
    for s in range(0, len(pts), chunk):
        dx = np.linalg.norm(pts[s:s + chunk, None, :] - pts[None, :, :], axis=2)
        dv = np.abs(v[s:s + chunk, None] - v[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(dx > 0, dv / dx ** alpha, 0.0)
        best = max(best, float(r.max()))
    return best


def boundary_hat(X: np.ndarray, width: float = 0.25) -> np.ndarray:
    """prod_k min(1, x_k / w, (1 - x_k) / w): 1 in the interior, 0 on the boundary."""
    return np.prod(np.clip(np.minimum(X, 1.0 - X) / width, 0.0, 1.0), axis=1)


def envelope_function(values: np.ndarray, nodes: np.ndarray, L0: float, alpha: float = 1.0,
                      hat_width: float = 0.25):
    """x -> hat(x) * max(min_y {v(y) + L0 |x - y|^alpha}, -max|v|) over the seeded nodes y."""
    floor = -float(np.abs(values).max())

    def f(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        dist = np.linalg.norm(X[:, None, :] - nodes[None, :, :], axis=2)
        env = np.min(values[None, :] + L0 * dist ** alpha, axis=1)
        return boundary_hat(X, hat_width) * np.maximum(env, floor)

    return f


def envelope_family(n_functions: int, d: int, alpha: float = 1.0, seed: int = 0,
                    coarse: int = 6) -> Iterable[TestFunction]:
    """Seeded random grid data, Lipschitz envelope, boundary hat; L measured by brute force."""
    rng = np.random.default_rng(seed)
    ax = (np.arange(coarse) + 0.5) / coarse
    nodes = np.stack([g.ravel() for g in np.meshgrid(*([ax] * d), indexing="ij")], axis=1)
    for i in range(n_functions):
        vals = rng.uniform(-1.0, 1.0, len(nodes))
        L0 = float(rng.uniform(1.0, 4.0))
        f = envelope_function(vals, nodes, L0, alpha)
        yield TestFunction(f, brute_force_lipschitz(f, d, alpha), alpha, d, f"envelope-{seed}-{i}")


def tent(X) -> np.ndarray:
    """min(x, 1 - x) in d = 1 (L = 1)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.minimum(X[:, 0], 1.0 - X[:, 0])


# --- rate check -------------------------------------------------------------------------

def rate_bound(L: float, d: int, alpha: float, N: int) -> float:
    return 2.0 * L * d * N ** (-alpha / d)


def verify_rate(family: Iterable[TestFunction], p_list, refine: int = 4, path=None) -> list[dict]:
    """Fit every test function at every level p and compare the dense-grid sup error to 2 L d N^(-alpha/d)."""
    rows = []
    for tf in family:
        for p in p_list:
            s = fit_spline(tf.f, p, tf.d)
            X = dense_grid(tf.d, refine * 2 ** p + 1)
            err = float(np.max(np.abs(s(X) - tf.f(X))))
            bound = rate_bound(tf.L, tf.d, tf.alpha, s.N)
            rows.append({"p": p, "N": s.N, "L": tf.L, "alpha": tf.alpha, "sup_error": err,
                         "bound": bound, "pass": err <= bound + 1e-9})
    if path is not None:
        write_rate_csv(rows, path)
    return rows


def write_rate_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r["p"], r["N"], repr(float(r["L"])), repr(float(r["alpha"])),
                        repr(r["sup_error"]), repr(r["bound"]), int(r["pass"])])
