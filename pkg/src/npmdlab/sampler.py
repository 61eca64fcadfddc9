"""Geometric-stopping samplers for discounted visitation distributions.

A trajectory is continued with probability gamma at each step, so the state
(or state-action pair) where it stops is distributed as the discounted
visitation distribution. The batch samplers run many independent chains at
once and have the same law as the scalar ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .env import Mdp, PolicyTable

MAX_STEPS = 10_000_000


class RunawaySamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class VisitationSample:
    state: int
    action: int
    trajectory_len: int


@dataclass(frozen=True)
class CriticTarget:
    state: int
    action: int
    target_value: float


@dataclass
class CriticDataset:
    """Regression data for one action: states from nu_rho^pi and one-sample Q targets."""

    action: int
    states: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    targets: np.ndarray
    oracle_calls: int

    def records(self) -> list[CriticTarget]:
        return [CriticTarget(int(s), self.action, float(y)) for s, y in zip(self.states, self.targets)]


def _policy_probs(pi, m: Mdp) -> np.ndarray:
    if isinstance(pi, PolicyTable):
        return pi.probs
    if callable(pi):
        return np.array([pi(s) for s in range(m.n_states)], dtype=float)
    return np.asarray(pi, dtype=float)


def _draw(p: np.ndarray, rng) -> int:
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))


def _continue(m: Mdp, probs: np.ndarray, s: int, a: int, gamma: float, rng) -> VisitationSample:
    t = 0
    while rng.random() < gamma:
        s = _draw(m.kernel[s, a], rng)
        a = _draw(probs[s], rng)
        t += 1
        if t >= MAX_STEPS:
            raise RunawaySamplerError(f"trajectory exceeded {MAX_STEPS} steps")
    return VisitationSample(s, a, t)


def sample_visitation(m: Mdp, pi, rho=None, gamma: float | None = None, rng=None) -> VisitationSample:
    """One draw of (s, a) from the discounted state-action visitation distribution."""
    rng = np.random.default_rng() if rng is None else rng
    gamma = m.gamma if gamma is None else gamma
    probs = _policy_probs(pi, m)
    rho = m.rho if rho is None else np.asarray(rho, dtype=float)
    s = _draw(rho, rng)
    return _continue(m, probs, s, _draw(probs[s], rng), gamma, rng)


def sample_next_visitation(m: Mdp, pi, s: int, a: int, gamma: float | None = None,
                           rng=None) -> VisitationSample:
    """Take (s, a) once, then keep sampling: a draw from nu-bar with start P(.|s,a)."""
    rng = np.random.default_rng() if rng is None else rng
    gamma = m.gamma if gamma is None else gamma
    probs = _policy_probs(pi, m)
    s1 = _draw(m.kernel[s, a], rng)
    return _continue(m, probs, s1, _draw(probs[s1], rng), gamma, rng)


def _draw_rows(cum: np.ndarray, rng) -> np.ndarray:
    u = rng.random(cum.shape[0])
    return np.minimum((cum < u[:, None]).sum(axis=1), cum.shape[1] - 1)


def _continue_batch(m: Mdp, probs: np.ndarray, s: np.ndarray, a: np.ndarray, gamma: float, rng):
    kcum = np.cumsum(m.kernel, axis=2)
    pcum = np.cumsum(probs, axis=1)
    s, a = s.copy(), a.copy()
    T = np.zeros(s.size, dtype=np.int64)
    active = np.arange(s.size)
    steps = 0
    while active.size:
        go = rng.random(active.size) < gamma
        active = active[go]
        if not active.size:
            break
        s[active] = _draw_rows(kcum[s[active], a[active]], rng)
        a[active] = _draw_rows(pcum[s[active]], rng)
        T[active] += 1
        steps += 1
        if steps >= MAX_STEPS:
            raise RunawaySamplerError(f"trajectory exceeded {MAX_STEPS} steps")
    return s, a, T


def sample_visitation_batch(m: Mdp, pi, n: int, rng, rho=None, gamma: float | None = None):
    """``n`` independent visitation draws; returns arrays (states, actions, trajectory_len)."""
    gamma = m.gamma if gamma is None else gamma
    probs = _policy_probs(pi, m)
    rho = m.rho if rho is None else np.asarray(rho, dtype=float)
    s0 = _draw_rows(np.broadcast_to(np.cumsum(rho), (n, rho.size)), rng)
    a0 = _draw_rows(np.cumsum(probs, axis=1)[s0], rng)
    return _continue_batch(m, probs, s0, a0, gamma, rng)


def sample_next_visitation_batch(m: Mdp, pi, states: np.ndarray, action: int | np.ndarray, rng,
                                 gamma: float | None = None):
    """Batch form of :func:`sample_next_visitation` for many start states."""
    gamma = m.gamma if gamma is None else gamma
    probs = _policy_probs(pi, m)
    states = np.asarray(states, dtype=np.int64)
    actions = np.broadcast_to(np.asarray(action, dtype=np.int64), states.shape)
    s1 = _draw_rows(np.cumsum(m.kernel, axis=2)[states, actions], rng)
    a1 = _draw_rows(np.cumsum(probs, axis=1)[s1], rng)
    return _continue_batch(m, probs, s1, a1, gamma, rng)


def make_critic_dataset(m: Mdp, pi, N: int, gamma: float | None = None, rng=None,
                        rho=None) -> list[CriticDataset]:
    """Per action: N states from nu_rho^pi with targets c(s,a) + gamma/(1-gamma) c(s',a').

    Each action gets its own child RNG stream so datasets do not depend on
    the order in which actions are processed.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    gamma = m.gamma if gamma is None else gamma
    out = []
    for a, stream in enumerate(rng.spawn(m.n_actions)):
        s, _, T = sample_visitation_batch(m, pi, N, stream, rho, gamma)
        s2, a2, T2 = sample_next_visitation_batch(m, pi, s, a, stream, gamma)
        tail = gamma / (1.0 - gamma) * m.cost[s2, a2] if gamma > 0 else 0.0
        y = m.cost[s, a] + tail
        calls = int((T + 1).sum() + (T2 + 1).sum())
        out.append(CriticDataset(a, s, s2, a2, y, calls))
    return out


def write_dataset_csv(m: Mdp, datasets: list[CriticDataset], path) -> None:
    """One row per sample: action, the D ambient coordinates, target value."""
    X = m.coords()
    D = X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["action", *[f"x{i}" for i in range(D)], "target"])
        for ds in datasets:
            for s, y in zip(ds.states, ds.targets):
                w.writerow([ds.action, *(repr(float(v)) for v in X[s]), repr(float(y))])


def read_dataset_csv(path):
    """Return (actions, X, targets) arrays from :func:`write_dataset_csv` output."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(int), data[:, 1:-1], data[:, -1]
