"""Finite MDPs, exact tabular oracles and Lipschitz-MDP diagnostics.

Costs are minimized. Continuous-state environments live on a manifold
epsilon-net, so every oracle here is an exact finite computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .manifold import EmbeddedManifold, embedded_circle_net, lipschitz_ratio_max

ROW_TOL = 1e-12
RESIDUAL_TOL = 1e-10


class NonFiniteMdpError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


class FullSupportError(ValueError):
    pass


class OracleMismatchError(AssertionError):
    pass


@dataclass(frozen=True)
class Mdp:
    """Finite-action MDP with an exact kernel ``P[s, a, s']`` and cost ``c[s, a]``.

    ``net`` optionally attaches ambient coordinates (one net point per state).
    """

    kernel: np.ndarray
    cost: np.ndarray
    gamma: float
    rho: np.ndarray
    cost_bound: float | None = None
    net: EmbeddedManifold | None = None
    name: str = "mdp"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.kernel, dtype=float)
        c = np.array(self.cost, dtype=float)
        rho = np.array(self.rho, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise NonFiniteMdpError("kernel must have shape (S, A, S)")
        S, A, _ = P.shape
        if c.shape != (S, A):
            raise ValueError(f"cost must have shape {(S, A)}, got {c.shape}")
        if rho.shape != (S,):
            raise ValueError("rho must be a vector over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("kernel rows must be probability vectors")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > ROW_TOL:
            raise ValueError("rho must be a probability vector")
        C = float(c.max()) if self.cost_bound is None else float(self.cost_bound)
        if C <= 0:
            C = 1.0
        if np.any(c < 0) or np.any(c > C + 1e-12):
            raise ValueError(f"costs must lie in [0, C={C}]")
        if self.net is not None and self.net.n_points != S:
            raise ValueError("net must carry one point per state")
        for arr in (P, c, rho):
            arr.setflags(write=False)
        object.__setattr__(self, "kernel", P)
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "cost_bound", C)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @property
    def full_support(self) -> bool:
        return bool(np.all(self.rho > 0))

    @property
    def value_bound(self) -> float:
        return self.cost_bound / (1.0 - self.gamma)

    def coords(self) -> np.ndarray:
        """Ambient coordinates of every state (requires a net)."""
        if self.net is None:
            raise NonFiniteMdpError(f"{self.name} has no manifold net attached")
        return self.net.points

    def with_rho(self, rho) -> "Mdp":
        return Mdp(self.kernel, self.cost, self.gamma, rho, self.cost_bound, self.net, self.name, self.meta)


@dataclass(frozen=True)
class PolicyTable:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy table must be |S| x |A|")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "PolicyTable":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "PolicyTable":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, n_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls(p)

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng) -> "PolicyTable":
        return cls(rng.dirichlet(np.ones(n_actions), size=n_states))


@dataclass(frozen=True)
class LipschitzMdpReport:
    L_c_hat: float
    L_P_hat: float
    alpha: float
    L_Q_bound: float
    normalized_LQ: float


def _probs(pi) -> np.ndarray:
    return pi.probs if isinstance(pi, PolicyTable) else np.asarray(pi, dtype=float)


def _check_policy(m: Mdp, pi) -> np.ndarray:
    p = _probs(pi)
    if p.shape != (m.n_states, m.n_actions):
        raise ValueError(f"policy shape {p.shape} does not match MDP {(m.n_states, m.n_actions)}")
    return p


def policy_kernel(m: Mdp, pi) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state kernel and expected cost under ``pi``."""
    p = _check_policy(m, pi)
    return np.einsum("sa,sat->st", p, m.kernel), np.einsum("sa,sa->s", p, m.cost)


def _solve(A: np.ndarray, b: np.ndarray, trans: int = 0) -> np.ndarray:
    lu = lu_factor(A, check_finite=True)
    x = lu_solve(lu, b, trans=trans)
    lhs = A.T @ x if trans else A @ x
    scale = max(1.0, float(np.abs(b).max()), float(np.abs(x).max()))
    if not np.all(np.isfinite(x)) or np.abs(lhs - b).max() > RESIDUAL_TOL * scale:
        raise SingularSystemError("linear solve failed its residual check")
    return x


def policy_evaluate(m: Mdp, pi) -> tuple[np.ndarray, np.ndarray]:
    """Exact (V, Q) of ``pi`` from the linear Bellman system."""
    P_pi, c_pi = policy_kernel(m, pi)
    S = m.n_states
    V = _solve(np.eye(S) - m.gamma * P_pi, c_pi)
    Q = m.cost + m.gamma * m.kernel @ V
    return V, Q


def greedy(Q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lowest-index action among the (near-)minimizers of each row of Q."""
    scale = max(1.0, float(np.abs(Q).max()))
    best = Q.min(axis=1, keepdims=True)
    return np.argmax(Q <= best + tol * scale, axis=1)


def optimal_values(m: Mdp, max_iter: int = 10_000) -> tuple[np.ndarray, PolicyTable]:
    """Optimal values and a deterministic optimal policy via policy iteration."""
    A = m.n_actions
    actions = np.zeros(m.n_states, dtype=int)
    for _ in range(max_iter):
        pi = PolicyTable.deterministic(actions, A)
        V, Q = policy_evaluate(m, pi)
        cur = Q[np.arange(m.n_states), actions]
        scale = max(1.0, float(np.abs(Q).max()))
        # switch only on strict improvement so floating noise cannot cycle
        improve = Q.min(axis=1) < cur - 1e-12 * scale
        if not improve.any():
            break
        actions = np.where(improve, greedy(Q), actions)
    actions = greedy(Q)
    pi_star = PolicyTable.deterministic(actions, A)
    V, Q = policy_evaluate(m, pi_star)
    resid = np.abs(V - Q.min(axis=1)).max()
    if resid > RESIDUAL_TOL * max(1.0, m.value_bound):
        raise SingularSystemError(f"Bellman optimality residual {resid:.3e}")
    return V, pi_star


def value_iteration(m: Mdp, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    V = np.zeros(m.n_states)
    for _ in range(max_iter):
        V_new = (m.cost + m.gamma * m.kernel @ V).min(axis=1)
        if np.abs(V_new - V).max() < tol:
            return V_new
        V = V_new
    return V


def visitation_distribution(m: Mdp, pi, rho=None) -> tuple[np.ndarray, np.ndarray]:
    """Discounted state and state-action visitation distributions from ``rho``."""
    p = _check_policy(m, pi)
    rho = m.rho if rho is None else np.asarray(rho, dtype=float)
    P_pi, _ = policy_kernel(m, p)
    x = _solve(np.eye(m.n_states) - m.gamma * P_pi, rho, trans=1)
    nu = np.clip((1.0 - m.gamma) * x, 0.0, None)
    nu /= nu.sum()
    return nu, nu[:, None] * p


def value_at(m: Mdp, V: np.ndarray, rho=None) -> float:
    rho = m.rho if rho is None else rho
    return float(rho @ V)


def mismatch_kappa(m: Mdp, pi_star) -> tuple[float, float]:
    """Distribution mismatch kappa = max nu^{pi*}/rho and gamma_rho = 1 - (1-gamma)/kappa."""
    if not m.full_support:
        raise FullSupportError("initial distribution must have full support")
    nu, _ = visitation_distribution(m, pi_star)
    kappa = float(np.max(nu / m.rho))
    return kappa, 1.0 - (1.0 - m.gamma) / kappa


def tv_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise total-variation (half l1) distance between probability rows."""
    return 0.5 * np.abs(rows[:, None, :] - rows[None, :, :]).sum(axis=2)


def lipschitz_mdp_report(m: Mdp, alpha: float = 1.0) -> LipschitzMdpReport:
    """Net-scale Lipschitz constants of the cost and the kernel.

    The kernel constant is reported as ``inf`` when two graph-adjacent states
    have mutually singular transition rows: no finite constant survives net
    refinement in that case.
    """
    if m.net is None:
        raise NonFiniteMdpError("lipschitz report needs states on a manifold net")
    dist = m.net.distance_matrix()
    adj = m.net.adjacency()
    adj = (adj + adj.T).tocoo()
    L_c = 0.0
    L_P = 0.0
    for a in range(m.n_actions):
        L_c = max(L_c, lipschitz_ratio_max(m.cost[:, a], dist, alpha, 0.0))
        tv = tv_matrix(m.kernel[:, a, :])
        if np.any(tv[adj.row, adj.col] >= 1.0 - 1e-12):
            L_P = float("inf")
            continue
        off = ~np.eye(m.n_states, dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(off & (tv > 0), tv / dist ** alpha, 0.0)
        L_P = max(L_P, float(r.max()))
    g, C = m.gamma, m.cost_bound
    # 0 * inf stays 0 when the kernel term is switched off
    kernel_term = g * C / (1.0 - g) * L_P if g * L_P > 0 else 0.0
    return LipschitzMdpReport(
        L_c_hat=L_c,
        L_P_hat=L_P,
        alpha=alpha,
        L_Q_bound=L_c + kernel_term,
        normalized_LQ=(1.0 - g) * L_c / C + (g * L_P if g * L_P > 0 else 0.0),
    )


def performance_difference(m: Mdp, pi, pi_prime, tol: float = 1e-9) -> float:
    """V^{pi'}(rho) - V^{pi}(rho) through the advantage form, cross-checked directly."""
    p, pp = _check_policy(m, pi), _check_policy(m, pi_prime)
    V, Q = policy_evaluate(m, p)
    V2, _ = policy_evaluate(m, pp)
    nu2, _ = visitation_distribution(m, pp)
    rhs = float(nu2 @ np.einsum("sa,sa->s", Q, pp - p)) / (1.0 - m.gamma)
    lhs = value_at(m, V2) - value_at(m, V)
    if abs(lhs - rhs) > tol:
        raise OracleMismatchError(f"performance difference mismatch: {lhs!r} vs {rhs!r}")
    return rhs


# --- constructors -----------------------------------------------------------

def random_mdp(n_states: int, n_actions: int, gamma: float = 0.9, seed: int = 0,
               cost_bound: float = 1.0, rho=None, concentration: float = 1.0) -> Mdp:
    """Seeded MDP with Dirichlet kernel rows and uniform costs in [0, C]."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    c = rng.uniform(0.0, cost_bound, size=(n_states, n_actions))
    rho = np.full(n_states, 1.0 / n_states) if rho is None else rho
    return Mdp(P, c, gamma, rho, cost_bound, name=f"random-{n_states}x{n_actions}-s{seed}")


def _circle_setup(n: int, embed_dim: int | None, seed: int):
    base = embedded_circle_net(n, None)
    net = base if embed_dim is None else embedded_circle_net(n, embed_dim, seed)
    return base, net


def _goal_cost(base: EmbeddedManifold, goal: int, alpha: float, n_actions: int) -> tuple[np.ndarray, float]:
    dist = base.distance_matrix()[:, goal] ** alpha
    return np.repeat(dist[:, None], n_actions, axis=1), float(base.distance_matrix().max() ** alpha)


def _blurred_rows(base: EmbeddedManifold, targets: np.ndarray, sigma: float) -> np.ndarray:
    d = base.distance_matrix()[targets]
    w = np.exp(-0.5 * (d / sigma) ** 2)
    return w / w.sum(axis=1, keepdims=True)


def rotation_circle(n: int = 64, shift: int = 5, gamma: float = 0.9, alpha: float = 1.0,
                    goal: int = 0, n_actions: int = 2, embed_dim: int | None = None,
                    seed: int = 0) -> Mdp:
    """Every action rotates the circle by ``shift`` net steps; cost is distance to goal."""
    base, net = _circle_setup(n, embed_dim, seed)
    P = np.zeros((n, n_actions, n))
    P[np.arange(n), :, (np.arange(n) + shift) % n] = 1.0
    c, C = _goal_cost(base, goal, alpha, n_actions)
    return Mdp(P, c, gamma, np.full(n, 1.0 / n), C, net, "rotation-circle",
               {"n": n, "shift": shift, "alpha": alpha, "goal": goal, "embed_dim": embed_dim, "seed": seed})


def smoothed_rotation_circle(n: int = 64, shift: int = 5, sigma: float = 0.3, gamma: float = 0.9,
                             alpha: float = 1.0, goal: int = 0, embed_dim: int | None = None,
                             seed: int = 0) -> Mdp:
    """Action 0 rotates by +shift, action 1 by -shift, each blurred by a Gaussian of width sigma."""
    base, net = _circle_setup(n, embed_dim, seed)
    idx = np.arange(n)
    P = np.stack([_blurred_rows(base, (idx + s) % n, sigma) for s in (shift, -shift)], axis=1)
    c, C = _goal_cost(base, goal, alpha, 2)
    return Mdp(P, c, gamma, np.full(n, 1.0 / n), C, net, "smoothed-rotation-circle",
               {"n": n, "shift": shift, "sigma": sigma, "alpha": alpha, "goal": goal,
                "embed_dim": embed_dim, "seed": seed})


def point_goal_circle(n: int = 64, step: int = 3, sigma: float = 0.1, gamma: float = 0.9,
                      alpha: float = 1.0, goal: int = 0, embed_dim: int | None = None,
                      seed: int = 0) -> Mdp:
    """Move counterclockwise (action 0) or clockwise (action 1) by ``step`` net steps under Gaussian slip.

    The cost of (s, a) is the expected geodesic distance, raised to ``alpha``,
    from the landing state to the goal. Kernel and cost are built on the planar
    net, so the MDP is identical for every embedding dimension; only the state
    coordinates change.
    """
    base, net = _circle_setup(n, embed_dim, seed)
    idx = np.arange(n)
    P = np.stack([_blurred_rows(base, (idx + s) % n, sigma) for s in (step, -step)], axis=1)
    c = P @ (base.distance_matrix()[:, goal] ** alpha)
    return Mdp(P, c, gamma, np.full(n, 1.0 / n), float(c.max()), net, "point-goal-circle",
               {"n": n, "step": step, "sigma": sigma, "alpha": alpha, "goal": goal,
                "embed_dim": embed_dim, "seed": seed})


ENVIRONMENTS = {
    "rotation-circle": rotation_circle,
    "smoothed-rotation-circle": smoothed_rotation_circle,
    "point-goal-circle": point_goal_circle,
}


def make_env(spec: dict) -> Mdp:
    """Build an environment from ``{"name": ..., **kwargs}``; ``embed-dim`` is accepted."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "random":
        return random_mdp(**spec)
    if name == "file":
        return load_mdp(spec["path"])
    kwargs = {k.replace("-", "_"): v for k, v in spec.items()}
    try:
        return ENVIRONMENTS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def save_mdp(m: Mdp, path) -> None:
    doc = {
        "name": m.name,
        "n_states": m.n_states,
        "n_actions": m.n_actions,
        "gamma": m.gamma,
        "cost_bound": m.cost_bound,
        "rho": m.rho.tolist(),
        "cost": m.cost.tolist(),
        "kernel": m.kernel.tolist(),
    }
    if m.net is not None:
        doc["intrinsic_dim"] = m.net.intrinsic_dim
        doc["edge_radius"] = m.net.edge_radius
        doc["points"] = m.net.points.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_mdp(path) -> Mdp:
    with open(path) as fh:
        doc = json.load(fh)
    net = None
    if "points" in doc:
        net = EmbeddedManifold(np.array(doc["points"]), doc["intrinsic_dim"], doc.get("edge_radius"))
    return Mdp(np.array(doc["kernel"]), np.array(doc["cost"]), doc["gamma"], np.array(doc["rho"]),
               doc["cost_bound"], net, doc.get("name", "mdp"))
