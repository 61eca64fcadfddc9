"""Command-line driver: ``npmdlab --command NAME --config cfg.json --out DIR``.

The config is JSON with optional sections ``env``, ``npmd``, ``sweep``,
``sampler``, ``spline``, ``lipschitz`` and ``report``. ``--override a.b=v``
sets a dotted key (bare keys go to ``npmd``); values are parsed as JSON when
possible. Exit status is 0 iff every asserted invariant of the command held.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import env as envmod
from .manifold import estimate_lipschitz
from .npmd import NpmdConfig, RunLog, run_exact_pmd, run_npmd
from .report import make_report
from .sampler import sample_visitation_batch
from .spline import envelope_family, verify_rate, write_rate_csv

log = logging.getLogger("npmdlab")

COMMANDS = ("npmd", "exact-pmd", "sampler-check", "spline-rate", "lipschitz-report",
            "resolution-sweep", "report")

DEFAULT_ENV = {"name": "point-goal-circle", "embed_dim": 32}


@dataclass
class ExperimentPlan:
    command: str
    env: dict
    config: dict
    out_dir: str
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        os.makedirs(self.out_dir, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise PermissionError(f"output directory {self.out_dir} is not writable")

    def section(self, name: str) -> dict:
        return dict(self.config.get(name, {}))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, item: str) -> None:
    if "=" not in item:
        raise ValueError(f"override {item!r} is not KEY=VALUE")
    key, val = item.split("=", 1)
    parts = key.split(".") if "." in key else ["npmd", key]
    node = config
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = parse_value(val)


def parse_seeds(text: str | None) -> list[int]:
    if not text:
        return [0]
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


# --- commands -------------------------------------------------------------------------

def _npmd_config(plan: ExperimentPlan, seed: int) -> NpmdConfig:
    return NpmdConfig.from_dict({**plan.section("npmd"), "seed": seed})


def cmd_npmd(plan: ExperimentPlan) -> bool:
    m = envmod.make_env(plan.env)
    ok = True
    for seed in plan.seeds:
        out = os.path.join(plan.out_dir, f"seed_{seed}")
        runlog = run_npmd(m, _npmd_config(plan, seed), out)
        _write_timings(runlog, out)
        bounded = runlog.column("target_bounded")[:-1]
        ok &= bool(np.all(bounded == 1))
        g = runlog.gaps
        log.info("seed %d: gap %.4g -> %.4g (ratio %.4f)", seed, g[0], g[-1], g[-1] / g[0] if g[0] else 0.0)
    return ok


def _write_timings(runlog: RunLog, out: str) -> None:
    # wall times are kept out of runlog.csv so that file stays byte-reproducible
    with open(os.path.join(out, "timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "wall_time"])
        for r in runlog.rows:
            w.writerow([r["k"], r["wall_time"]])


def cmd_exact_pmd(plan: ExperimentPlan) -> bool:
    ok = True
    for seed in plan.seeds:
        spec = dict(plan.env)
        if spec.get("name") == "random":
            spec.setdefault("seed", seed)
        m = envmod.make_env(spec)
        out = os.path.join(plan.out_dir, f"seed_{seed}")
        os.makedirs(out, exist_ok=True)
        try:
            runlog = run_exact_pmd(m, _npmd_config(plan, seed))
        except AssertionError as exc:
            log.error("seed %d: %s", seed, exc)
            ok = False
            continue
        runlog.write_csv(os.path.join(out, "runlog.csv"))
        with open(os.path.join(out, "meta.json"), "w") as fh:
            json.dump(runlog.meta, fh, indent=2, sort_keys=True, default=float)
    return ok


def sampler_check(m: envmod.Mdp, pi, gamma: float, n: int, rng) -> dict:
    """Empirical (s, a) law and trajectory length of the geometric sampler vs closed forms."""
    mg = envmod.Mdp(m.kernel, m.cost, gamma, m.rho, m.cost_bound, m.net, m.name)
    s, a, T = sample_visitation_batch(mg, pi, n, rng)
    emp = np.zeros((m.n_states, m.n_actions))
    np.add.at(emp, (s, a), 1.0)
    emp /= n
    _, nu_sa = envmod.visitation_distribution(mg, pi)
    tv = 0.5 * float(np.abs(emp - nu_sa).sum())
    mean_len = float((T + 1).mean())
    expected = 1.0 / (1.0 - gamma)
    return {"gamma": gamma, "n": n, "tv": tv, "mean_len": mean_len, "expected_len": expected,
            "len_rel_err": abs(mean_len - expected) / expected}


def cmd_sampler_check(plan: ExperimentPlan) -> bool:
    cfg = {"n_samples": 100_000, "gammas": [0.5, 0.9], "n_states": 8, "n_actions": 2,
           "tv_tol": 0.02, "len_tol": 0.02, **plan.section("sampler")}
    rows = []
    for seed in plan.seeds:
        m = envmod.random_mdp(cfg["n_states"], cfg["n_actions"], seed=seed)
        pi = envmod.PolicyTable.random(m.n_states, m.n_actions, np.random.default_rng(seed + 1))
        for g in cfg["gammas"]:
            r = sampler_check(m, pi, g, cfg["n_samples"], np.random.default_rng([seed, int(g * 1000)]))
            r["pass"] = r["tv"] <= cfg["tv_tol"] and r["len_rel_err"] <= cfg["len_tol"]
            rows.append({"seed": seed, **r})
    _write_rows(os.path.join(plan.out_dir, "sampler_check.csv"), rows)
    return all(r["pass"] for r in rows)


def cmd_spline_rate(plan: ExperimentPlan) -> bool:
    cfg = {"d_list": [1, 2], "p_list": [2, 3, 4], "n_functions": 10, "alpha": 1.0, **plan.section("spline")}
    rows = []
    for seed in plan.seeds:
        for d in cfg["d_list"]:
            rows += verify_rate(envelope_family(cfg["n_functions"], d, cfg["alpha"], seed=seed * 100 + d),
                                cfg["p_list"])
    write_rate_csv(rows, os.path.join(plan.out_dir, "spline_rate.csv"))
    return all(r["pass"] for r in rows)


def lipschitz_rows(m: envmod.Mdp, n_policies: int, alpha: float, rng) -> tuple[list[dict], envmod.LipschitzMdpReport]:
    rep = envmod.lipschitz_mdp_report(m, alpha)
    rows = []
    for i in range(n_policies):
        pi = envmod.PolicyTable.random(m.n_states, m.n_actions, rng)
        _, Q = envmod.policy_evaluate(m, pi)
        for a in range(m.n_actions):
            q_lip = estimate_lipschitz(m.net, Q[:, a], alpha, 0.0)
            rows.append({"policy": i, "action": a, "q_lip": q_lip, "L_c": rep.L_c_hat, "L_P": rep.L_P_hat,
                         "bound": rep.L_Q_bound, "pass": q_lip <= rep.L_Q_bound + 1e-9})
    return rows, rep


def cmd_lipschitz_report(plan: ExperimentPlan) -> bool:
    cfg = {"n_policies": 20, "alpha": 1.0, **plan.section("lipschitz")}
    env_spec = plan.config.get("env") or {"name": "smoothed-rotation-circle"}
    m = envmod.make_env(env_spec)
    rows = []
    for seed in plan.seeds:
        r, rep = lipschitz_rows(m, cfg["n_policies"], cfg["alpha"], np.random.default_rng(seed))
        rows += [{"seed": seed, **x} for x in r]
    _write_rows(os.path.join(plan.out_dir, "lipschitz_report.csv"), rows)
    return all(r["pass"] for r in rows)


# --- resolution sweep -----------------------------------------------------------------

def ema(values, beta: float = 0.9) -> float:
    """EMA_k = beta EMA_{k-1} + (1 - beta) R_k, started at EMA_0 = R_0."""
    out = None
    for v in values:
        out = v if out is None else beta * out + (1.0 - beta) * v
    return float(out)


def _sweep_cell(args) -> dict:
    env_spec, npmd_cfg, D, N, seed, out = args
    row = {"D": "native" if D is None else D, "N": N, "seed": seed}
    try:
        m = envmod.make_env({**env_spec, "embed_dim": D})
        cfg = NpmdConfig.from_dict({**npmd_cfg, "samples_per_action_N": N, "seed": seed})
        runlog = run_npmd(m, cfg, out)
        _write_timings(runlog, out)
        gaps = runlog.gaps
        rewards = -gaps
        row.update(final_gap=gaps[-1], ema_gap=-ema(rewards), max_gap=gaps.max(), final_reward=rewards[-1],
                   ema_reward=ema(rewards), max_reward=rewards.max(), initial_gap=gaps[0], status="ok", error="")
    except Exception as exc:  # a failed cell is recorded and the sweep continues
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.error("cell D=%s N=%s seed=%s failed:\n%s", D, N, seed, traceback.format_exc())
    return row


SUMMARY_FIELDS = ["D", "N", "seed", "initial_gap", "final_gap", "ema_gap", "max_gap",
                  "final_reward", "ema_reward", "max_reward", "status", "error"]


def sweep_spread(rows: list[dict]) -> dict:
    """Across-D range of per-D mean final gaps vs the mean within-D range over seeds."""
    by_d = {}
    for r in rows:
        if r["status"] == "ok":
            by_d.setdefault((r["D"], r["N"]), []).append(float(r["final_gap"]))
    means = [np.mean(v) for v in by_d.values()]
    within = [max(v) - min(v) for v in by_d.values() if len(v) > 1]
    across = float(max(means) - min(means)) if means else float("nan")
    within_mean = float(np.mean(within)) if within else float("nan")
    ok = bool(np.isfinite(across) and np.isfinite(within_mean) and across <= 3.0 * within_mean)
    return {"across_D_spread": across, "within_D_spread": within_mean, "ratio": across / within_mean
            if within_mean > 0 else float("inf"), "pass": ok}


def cmd_resolution_sweep(plan: ExperimentPlan) -> bool:
    cfg = {"D_list": [8, 32, 128], "N_list": [512], **plan.section("sweep")}
    env_spec = {k: v for k, v in (plan.config.get("env") or DEFAULT_ENV).items() if k != "embed_dim"}
    npmd_cfg = plan.section("npmd")
    cells = []
    for D in cfg["D_list"]:
        D = None if D in (None, "native") else int(D)
        for N in cfg["N_list"]:
            for seed in plan.seeds:
                tag = f"D{'native' if D is None else D}_N{N}_s{seed}"
                cells.append((env_spec, npmd_cfg, D, N, seed, os.path.join(plan.out_dir, tag)))
    workers = max(1, min(int(os.environ.get("NPMD_THREADS", os.cpu_count() or 1)), len(cells)))
    if workers == 1:
        rows = [_sweep_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    _write_rows(os.path.join(plan.out_dir, "summary.csv"), rows, SUMMARY_FIELDS)
    spread = sweep_spread(rows)
    _write_rows(os.path.join(plan.out_dir, "spread.csv"), [spread])
    log.info("sweep spread: %s", spread)
    return all(r["status"] == "ok" for r in rows)


def cmd_report(plan: ExperimentPlan, run_dirs) -> bool:
    run_dirs = list(run_dirs) or plan.section("report").get("run_dirs", [])
    make_report(run_dirs, plan.out_dir)
    return True


# --- plumbing ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path: str, rows: list[dict], fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f, "")) for f in fields])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npmdlab", description=__doc__.splitlines()[0])
    p.add_argument("--command", choices=COMMANDS, help="command to run (or set 'command' in the config)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", help="seed list, e.g. 0,1,2 or 0-4")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path; bare keys go to the npmd section)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("run_dirs", nargs="*", help="run directories for the report command")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
    for item in args.override:
        apply_override(config, item)
    command = args.command or config.get("command")
    if command is None:
        print("error: no command given (use --command)", file=sys.stderr)
        return 2
    seeds = parse_seeds(args.seed) if args.seed else config.get("seeds", [0])
    t0 = time.perf_counter()
    handlers = {
        "npmd": cmd_npmd, "exact-pmd": cmd_exact_pmd, "sampler-check": cmd_sampler_check,
        "spline-rate": cmd_spline_rate, "lipschitz-report": cmd_lipschitz_report,
        "resolution-sweep": cmd_resolution_sweep,
    }
    try:
        plan = ExperimentPlan(command, config.get("env") or DEFAULT_ENV, config, args.out, seeds)
        ok = cmd_report(plan, args.run_dirs) if command == "report" else handlers[command](plan)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = "ok" if ok else "INVARIANT FAILURE"
    print(f"{command}: {status} ({time.perf_counter() - t0:.1f}s) -> {plan.out_dir}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
