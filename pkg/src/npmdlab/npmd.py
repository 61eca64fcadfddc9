"""Neural policy mirror descent: schedules, mirror-descent targets, exact PMD and the NPMD driver.

Policies are softmax(f / lambda) over per-action actor networks f. Each
iteration fits one critic network per action to one-sample Q targets and
one actor network per action to gamma_rho * f_k - Q_w, with step sizes and
temperatures on geometric schedules driven by gamma_rho.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import cnn
from .env import (Mdp, lipschitz_mdp_report, mismatch_kappa, optimal_values,
                  policy_evaluate, value_at, visitation_distribution)
from .manifold import estimate_lipschitz
from .sampler import make_critic_dataset

LAMBDA_FLOOR = 1e-9
SCHEDULE_TOL = 1e-12


class ScheduleError(AssertionError):
    pass


class BoundViolation(AssertionError):
    pass


@dataclass
class NpmdConfig:
    """Run parameters. ``None`` fields are filled from the MDP (see :func:`resolve_config`)."""

    iterations_K: int = 15
    samples_per_action_N: int = 512
    gamma: float | None = None
    gamma_rho: float | None = None
    cost_bound_C: float | None = None
    alpha: float = 1.0
    # restriction inputs: critic class W(A_Q, L_Q, alpha, eps_Q); actor class scaled by 1/(1-gamma_rho)
    bound_A_Q: float | None = None
    lip_L_Q: float | None = None
    eps_Q: float = 0.0
    mu_lip: float = 0.0
    lip_pairs: int = 16
    # architecture: explicit sizes win over the budget formulas
    blocks_M: int | None = None
    layers_L: int | None = None
    channels_J: int | None = None
    filter_I: int | None = None
    kappa_M: float = 1.0
    kappa_L: float = 0.25
    L_max: int = 6
    kappa_J: float = 0.5
    J_min: int = 8
    kappa_R: float = 10.0
    R1: float = 1.0
    # trainer
    critic_epochs: int = 30
    actor_epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    warm_start: bool = True
    # step sizes: "schedule" uses the geometric eta_k / lambda_k, "constant" a fixed eta
    step_mode: str = "schedule"
    constant_eta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations_K < 0 or self.samples_per_action_N < 1:
            raise ValueError("need K >= 0 and N >= 1")
        if self.step_mode not in ("schedule", "constant"):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.gamma is not None and self.gamma_rho is not None:
            if not self.gamma - 1e-15 <= self.gamma_rho < 1.0:
                raise ValueError(f"gamma_rho={self.gamma_rho} must lie in [gamma, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "NpmdConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def resolve_config(m: Mdp, cfg: NpmdConfig) -> tuple[NpmdConfig, dict]:
    """Fill gamma, C, gamma_rho and restriction constants from the MDP; returns (config, meta)."""
    meta = {}
    gamma = m.gamma if cfg.gamma is None else cfg.gamma
    C = m.cost_bound if cfg.cost_bound_C is None else cfg.cost_bound_C
    if C < float(np.abs(m.cost).max()) - 1e-12:
        raise ValueError(f"cost_bound_C={C} is below max |c|")
    C = max(C, 1e-300)
    _, pi_star = optimal_values(m)
    kappa, g_rho_true = mismatch_kappa(m, pi_star) if gamma == m.gamma else (float("nan"), float("nan"))
    meta.update(kappa=kappa, gamma_rho_from_kappa=g_rho_true)
    g_rho = g_rho_true if cfg.gamma_rho is None else cfg.gamma_rho
    meta["gamma_rho_overridden"] = cfg.gamma_rho is not None
    if not gamma - 1e-15 <= g_rho < 1.0:
        raise ValueError(f"gamma_rho={g_rho} must lie in [gamma, 1)")
    lip = cfg.lip_L_Q
    if lip is None:
        if m.net is not None:
            rep = lipschitz_mdp_report(m, cfg.alpha)
            lip = rep.L_Q_bound
        else:
            lip = float("inf")
    A_Q = C / (1.0 - gamma) if cfg.bound_A_Q is None else cfg.bound_A_Q
    out = dataclasses.replace(cfg, gamma=gamma, gamma_rho=g_rho, cost_bound_C=C, lip_L_Q=lip, bound_A_Q=A_Q)
    return out, meta


# --- schedules and policies -------------------------------------------------------

def eta_schedule(k: int, gamma_rho: float, C: float) -> float:
    """eta_k = (1 - gamma_rho) / (C gamma_rho^(k+1)), evaluated in log space."""
    return math.exp(math.log1p(-gamma_rho) - math.log(C) - (k + 1) * math.log(gamma_rho))


def lambda_schedule(k: int, gamma_rho: float, C: float) -> float:
    """lambda_k = C gamma_rho^k / (1 - gamma_rho), evaluated in log space."""
    return math.exp(math.log(C) + k * math.log(gamma_rho) - math.log1p(-gamma_rho))


def check_schedule(k: int, gamma_rho: float, C: float) -> None:
    eta = eta_schedule(k, gamma_rho, C)
    lam, lam_next = lambda_schedule(k, gamma_rho, C), lambda_schedule(k + 1, gamma_rho, C)
    if abs(eta * lam_next - 1.0) > SCHEDULE_TOL or abs(lam_next / lam - gamma_rho) > SCHEDULE_TOL:
        raise ScheduleError(f"schedule identities fail at k={k}: eta*lam'={eta * lam_next!r}, "
                            f"lam'/lam={lam_next / lam!r}")


def softmax_policy(f: np.ndarray, lam: float) -> np.ndarray:
    """Rows of exp(f/lam) normalized, with max-subtraction; argmax (lowest index) once lam < 1e-9."""
    f = np.asarray(f, dtype=float)
    if lam <= 0:
        raise ValueError("temperature must be positive")
    if lam < LAMBDA_FLOOR:
        out = np.zeros_like(f)
        np.put_along_axis(out, np.argmax(f, axis=-1)[..., None], 1.0, axis=-1)
        return out
    z = (f - f.max(axis=-1, keepdims=True)) / lam
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pmd_target(f_k, Q_w, eta_k: float, lam_k: float, lam_next: float):
    """lambda_{k+1} g*_{k+1} = (lambda_{k+1}/lambda_k) f_k - eta_k lambda_{k+1} Q_w."""
    return (lam_next / lam_k) * np.asarray(f_k, dtype=float) - eta_k * lam_next * np.asarray(Q_w, dtype=float)


def _newton_simplex(Q: np.ndarray, pi: np.ndarray, eta: float, tol: float = 1e-28, max_iter: int = 500) -> np.ndarray:
    """Minimize <Q, p> + KL(p || pi) / eta over the simplex by damped Newton on the first n-1 coordinates."""
    n = Q.size
    if n == 1:
        return np.ones(1)

    def obj(p):
        return float(Q @ p + np.sum(p * np.log(p / pi)) / eta)

    p = pi.astype(float).copy()
    for _ in range(max_iter):
        g_full = Q + (np.log(p / pi) + 1.0) / eta
        g = g_full[:-1] - g_full[-1]
        h = 1.0 / (eta * p[:-1])
        c = 1.0 / (eta * p[-1])
        # Hessian diag(h) + c 11^T, solved via Sherman-Morrison
        hinv_g = g / h
        step = hinv_g - (c * hinv_g.sum() / (1.0 + c * (1.0 / h).sum())) / h
        dec = float(g @ step)
        if dec < tol:
            break
        d = np.append(-step, step.sum())
        t = 1.0
        neg = d < 0
        if np.any(neg):
            t = min(1.0, 0.99 * float(np.min(-p[neg] / d[neg])))
        f0 = obj(p)
        while t > 1e-20:
            q = p + t * d
            if np.all(q > 0) and obj(q) <= f0 - 0.25 * t * dec:
                break
            t *= 0.5
        p = q
    return p / p.sum()


class PmdMismatch(AssertionError):
    pass


def closed_form_pmd_check(Q_row, pi_row, eta: float, tv_tol: float = 1e-8) -> np.ndarray:
    """argmin_p <Q, p> + KL(p || pi)/eta two ways; returns the closed form after checking agreement."""
    Q = np.asarray(Q_row, dtype=float)
    pi = np.asarray(pi_row, dtype=float)
    if np.any(pi <= 0):
        raise ValueError("pi_row must be strictly positive")
    eta = max(float(eta), 1e-12)
    z = np.log(pi) - eta * (Q - Q.min())
    closed = np.exp(z - z.max())
    closed /= closed.sum()
    numeric = _newton_simplex(Q - Q.min(), pi / pi.sum(), eta)
    tv = 0.5 * float(np.abs(closed - numeric).sum())
    if not tv < tv_tol:
        raise PmdMismatch(f"closed form and Newton solver differ by TV {tv:.3e}")
    return closed


# --- diagnostics -------------------------------------------------------------------------

def exact_losses(m: Mdp, pi_k, Q_w: np.ndarray, f_k: np.ndarray | None = None, f_next: np.ndarray | None = None,
                 eta_k: float = 0.0, lam_k: float = 1.0, lam_next: float = 1.0) -> tuple[float, float]:
    """Critic loss E_nu ||Q_w - Q^{pi_k}||^2 and actor loss E_nu ||f'/lam' - f/lam + eta Q_w||^2, nu = nu_rho^{pi_k}."""
    nu, _ = visitation_distribution(m, pi_k)
    _, Q = policy_evaluate(m, pi_k)
    critic = float(nu @ ((Q_w - Q) ** 2).sum(axis=1))
    if f_k is None or f_next is None:
        return critic, float("nan")
    r = f_next / lam_next - f_k / lam_k + eta_k * Q_w
    return critic, float(nu @ (r ** 2).sum(axis=1))


class ZeroVisitationError(ZeroDivisionError):
    pass


def concentrability_diagnostic(m: Mdp, pi_k, pi_next, pi_star) -> tuple[float, float]:
    """chi^2(nu^pi || nu^{pi_k}) + 1 = sum nu^pi(s)^2 / nu^{pi_k}(s) for pi = pi_next and pi_star."""
    base, _ = visitation_distribution(m, pi_k)
    out = []
    for pi in (pi_next, pi_star):
        nu, _ = visitation_distribution(m, pi)
        if np.any((base <= 0) & (nu > 0)):
            raise ZeroVisitationError("nu^{pi_k} vanishes where nu^pi does not")
        mask = nu > 0
        out.append(float(np.sum(nu[mask] ** 2 / base[mask])))
    return out[0], out[1]


# --- run logs ------------------------------------------------------------------------------

LOG_FIELDS = [
    "k", "optimality_gap", "bound", "potential", "critic_loss", "actor_loss",
    "critic_sup", "critic_lip", "critic_pass", "actor_sup", "actor_lip", "actor_pass",
    "target_sup", "target_bounded", "target_lip", "chi2_next", "chi2_star",
    "eta", "lambda", "samples", "wall_time",
]


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: dict) -> None:
        if self.rows and row["k"] <= self.rows[-1]["k"]:
            raise ValueError("rows must be strictly ordered by k")
        self.rows.append({f: row.get(f, "") for f in LOG_FIELDS})

    def column(self, name: str) -> np.ndarray:
        return np.array([float("nan") if r[name] == "" else float(r[name]) for r in self.rows])

    @property
    def gaps(self) -> np.ndarray:
        return self.column("optimality_gap")

    def write_csv(self, path, deterministic: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(r[f], f == "wall_time" and deterministic) for f in LOG_FIELDS])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                if list(r) != LOG_FIELDS:
                    raise ValueError(f"{path}: unexpected header")
                r = dict(r)
                r["k"] = int(r["k"])
                log.rows.append(r)
        return log


def _fmt(v, blank: bool = False) -> str:
    if blank or v == "" or v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --- exact PMD ------------------------------------------------------------------------------

def _gap(m: Mdp, pi, v_star: float) -> float:
    V, _ = policy_evaluate(m, pi)
    return value_at(m, V) - v_star


def run_exact_pmd(m: Mdp, config: NpmdConfig, assert_bounds: bool = True) -> RunLog:
    """Idealized PMD: exact Q^{pi_k} and the exact per-state closed-form update.

    In schedule mode asserts gap_k <= gamma_rho^k (1 + log|A|) C/(1-gamma) and the
    contraction of gap_k + E_{nu*}[KL(pi* || pi_k)] / (kappa gamma_rho eta_k) by
    gamma_rho, provided gamma_rho is at least the value implied by the mismatch
    coefficient (otherwise neither guarantee applies and nothing is asserted).
    """
    cfg, meta = resolve_config(m, config)
    g, g_rho, C = cfg.gamma, cfg.gamma_rho, cfg.cost_bound_C
    V_star, pi_star = optimal_values(m)
    v_star = value_at(m, V_star)
    nu_star, _ = visitation_distribution(m, pi_star)
    a_star = np.argmax(pi_star.probs, axis=1)
    kappa_eff = (1.0 - g) / (1.0 - g_rho)
    sched = cfg.step_mode == "schedule"
    enforce = assert_bounds and sched and g == m.gamma and g_rho >= meta["gamma_rho_from_kappa"] - 1e-12
    log = RunLog(meta={**meta, "mode": "exact-pmd", "gamma": g, "gamma_rho": g_rho, "C": C,
                       "n_actions": m.n_actions, "kappa_eff": kappa_eff, "bounds_asserted": enforce})
    logits = np.full((m.n_states, m.n_actions), -math.log(m.n_actions))
    t0 = time.perf_counter()
    prev_phi = None
    c1 = 1.0 + math.log(m.n_actions)
    for k in range(cfg.iterations_K + 1):
        pi = softmax_policy(logits, 1.0)
        V, Q = policy_evaluate(m, pi)
        gap = value_at(m, V) - v_star
        eta = eta_schedule(k, g_rho, C) if sched else cfg.constant_eta
        bound = g_rho ** k * c1 * C / (1.0 - g) if sched else float("nan")
        kl = float(nu_star @ (-np.log(np.maximum(pi[np.arange(m.n_states), a_star], 1e-300))))
        phi = gap + kl / (kappa_eff * g_rho * eta) if sched else float("nan")
        if enforce:
            tol = 1e-9 * max(1.0, C / (1.0 - g))
            if gap > bound + tol:
                raise BoundViolation(f"k={k}: gap {gap:.6g} exceeds bound {bound:.6g}")
            if prev_phi is not None and phi > g_rho * prev_phi + 1e-9:
                raise BoundViolation(f"k={k}: potential {phi!r} > gamma_rho * {prev_phi!r}")
        if sched:
            check_schedule(k, g_rho, C)
        log.append({"k": k, "optimality_gap": gap, "bound": bound, "potential": phi,
                    "critic_loss": 0.0, "actor_loss": 0.0, "eta": eta,
                    "lambda": lambda_schedule(k, g_rho, C) if sched else "",
                    "samples": 0, "wall_time": time.perf_counter() - t0})
        prev_phi = phi
        z = logits - eta * (Q - Q.min(axis=1, keepdims=True))
        logits = z - z.max(axis=1, keepdims=True)
        logits -= np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return log


# --- NPMD -------------------------------------------------------------------------------------

@dataclass
class NpmdState:
    k: int
    actor: list[cnn.CnnParams | None]
    critic: list[cnn.CnnParams | None]
    eta: float
    lam: float


def build_spec(cfg: NpmdConfig, D: int, d: int) -> cnn.CnnSpec:
    k = cnn.SizingConstants(cfg.kappa_M, cfg.kappa_L, cfg.L_max, cfg.kappa_J, cfg.J_min, cfg.kappa_R, cfg.R1)
    base = cnn.architecture_from_budget(cfg.samples_per_action_N, D, d, cfg.alpha, k)
    over = {"blocks_M": cfg.blocks_M, "layers_per_block_L": cfg.layers_L,
            "max_channels_J": cfg.channels_J, "filter_size_I": cfg.filter_I}
    return dataclasses.replace(base, **{k_: v for k_, v in over.items() if v is not None})


def _net_values(heads, X: np.ndarray, A: float) -> np.ndarray:
    cols = [np.zeros(len(X)) if h is None else cnn.forward_batch(h, X, A) for h in heads]
    return np.column_stack(cols)


def run_npmd(m: Mdp, config: NpmdConfig, out_dir=None) -> RunLog:
    """Actor-critic NPMD on an MDP whose states carry ambient coordinates.

    The policy starts uniform (theta_0 = 0). Every iteration draws N states per
    action from nu_rho^{pi_k}, fits the critic heads, fits the actor heads to
    the mirror-descent targets on the same states and advances the schedules.
    Exact oracles are used only for logging.
    """
    cfg, meta = resolve_config(m, config)
    g, g_rho, C = cfg.gamma, cfg.gamma_rho, cfg.cost_bound_C
    if m.net is None:
        raise ValueError("run_npmd needs an MDP on a manifold net")
    X = m.coords()
    D = X.shape[1]
    spec = build_spec(cfg, D, m.net.intrinsic_dim)
    net = m.net
    A_Q = cfg.bound_A_Q
    A_pi = C / ((1.0 - g_rho) * (1.0 - g))
    crit_r = cnn.RestrictedClassSpec(A_Q, min(cfg.lip_L_Q, 1e300), cfg.alpha, cfg.eps_Q, net)
    act_r = cnn.RestrictedClassSpec(A_pi, min(cfg.lip_L_Q / (1.0 - g_rho), 1e300), cfg.alpha,
                                    cfg.eps_Q / (1.0 - g_rho), net)
    V_star, pi_star_t = optimal_values(m)
    v_star = value_at(m, V_star)
    pi_star = pi_star_t.probs
    sched = cfg.step_mode == "schedule"
    log = RunLog(meta={**meta, "mode": "npmd", "gamma": g, "gamma_rho": g_rho, "C": C, "D": D,
                       "n_actions": m.n_actions, "spec": dataclasses.asdict(spec), "A_critic": A_Q,
                       "A_actor": A_pi, "L_Q": cfg.lip_L_Q, "config": cfg.to_dict(),
                       "R1_note": "R1 is a fixed config cap, not the analysis value (8ID)^-1 M^-1/L"})
    root = np.random.default_rng(cfg.seed)
    state = NpmdState(0, [None] * m.n_actions, [None] * m.n_actions,
                      eta_schedule(0, g_rho, C) if sched else cfg.constant_eta,
                      lambda_schedule(0, g_rho, C) if sched else 1.0)
    hyper = dict(batch_size=cfg.batch_size, lr=cfg.lr, mu_lip=cfg.mu_lip, lip_pairs=cfg.lip_pairs)
    f_k = np.zeros((m.n_states, m.n_actions))
    samples = 0
    t0 = time.perf_counter()
    for k in range(cfg.iterations_K + 1):
        pi_k = softmax_policy(f_k, state.lam)
        gap = _gap(m, pi_k, v_star)
        row = {"k": k, "optimality_gap": gap, "eta": state.eta, "lambda": state.lam, "samples": samples,
               "bound": g_rho ** k * (1.0 + math.log(m.n_actions)) * C / (1.0 - g) if sched else ""}
        if k == cfg.iterations_K:
            row["wall_time"] = time.perf_counter() - t0
            log.append(row)
            break
        if sched:
            check_schedule(k, g_rho, C)
            lam_next = lambda_schedule(k + 1, g_rho, C)
        else:
            lam_next = state.lam
        it_rng, sample_rng = root.spawn(2)
        datasets = make_critic_dataset(m, pi_k, cfg.samples_per_action_N, g, sample_rng)
        samples += sum(ds.oracle_calls for ds in datasets)
        seeds = it_rng.integers(0, 2**31 - 1, size=(2, m.n_actions))
        critic = []
        for a, ds in enumerate(datasets):
            init = state.critic[a] if cfg.warm_start else None
            res = cnn.train_erm(spec, X[ds.states], ds.targets, crit_r,
                                cnn.TrainConfig(epochs=cfg.critic_epochs, seed=int(seeds[0, a]), **hyper), init)
            critic.append(res.params)
        Q_w = _net_values(critic, X, A_Q)
        actor = []
        target_all = pmd_target(f_k, Q_w, state.eta, state.lam, lam_next)
        for a, ds in enumerate(datasets):
            init = state.actor[a] if (cfg.warm_start and state.actor[a] is not None) else None
            res = cnn.train_erm(spec, X[ds.states], target_all[ds.states, a], act_r,
                                cnn.TrainConfig(epochs=cfg.actor_epochs, seed=int(seeds[1, a]), **hyper), init)
            actor.append(res.params)
        f_next = _net_values(actor, X, A_pi)
        pi_next = softmax_policy(f_next, lam_next)
        critic_loss, actor_loss = exact_losses(m, pi_k, Q_w, f_k, f_next, state.eta, state.lam, lam_next)
        crit_rep = [cnn.check_restriction(spec, p, crit_r, Q_w[:, a]) for a, p in enumerate(critic)]
        act_rep = [cnn.check_restriction(spec, p, act_r, f_next[:, a]) for a, p in enumerate(actor)]
        t_lip = max(estimate_lipschitz(net, target_all[:, a], cfg.alpha, act_r.proximity_eps)
                    for a in range(m.n_actions))
        chi_next, chi_star = concentrability_diagnostic(m, pi_k, pi_next, pi_star)
        t_sup = float(np.abs(target_all).max())
        row.update(
            critic_loss=critic_loss, actor_loss=actor_loss,
            critic_sup=max(r.sup_norm for r in crit_rep), critic_lip=max(r.lip_estimate for r in crit_rep),
            critic_pass=all(r.passed for r in crit_rep),
            actor_sup=max(r.sup_norm for r in act_rep), actor_lip=max(r.lip_estimate for r in act_rep),
            actor_pass=all(r.passed for r in act_rep),
            target_sup=t_sup, target_bounded=t_sup <= A_pi * (1 + 1e-9), target_lip=t_lip,
            chi2_next=chi_next, chi2_star=chi_star, wall_time=time.perf_counter() - t0)
        log.append(row)
        state = NpmdState(k + 1, actor, critic,
                          eta_schedule(k + 1, g_rho, C) if sched else cfg.constant_eta, lam_next)
        f_k = f_next
    if out_dir is not None:
        save_run(log, state, out_dir)
    return log


def save_run(log: RunLog, state: NpmdState, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    log.write_csv(os.path.join(out_dir, "runlog.csv"))
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(log.meta, fh, indent=2, sort_keys=True, default=float)
    for name, heads in (("actor", state.actor), ("critic", state.critic)):
        for a, p in enumerate(heads):
            if p is not None:
                cnn.save_params(p, os.path.join(out_dir, f"{name}_a{a}.bin"), {"k": state.k, "action": a})
