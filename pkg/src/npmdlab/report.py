"""Static plots and merged CSV from run directories."""

from __future__ import annotations

import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .npmd import LOG_FIELDS, RunLog  # noqa: E402


class MissingRunError(FileNotFoundError):
    pass


def load_runs(run_dirs) -> list[tuple[str, RunLog]]:
    """Load ``runlog.csv`` (and ``meta.json`` if present) from each directory."""
    run_dirs = list(run_dirs)
    if not run_dirs:
        raise MissingRunError("no run directories given")
    missing = []
    for d in run_dirs:
        if not os.path.isdir(d):
            missing.append(f"{d} (no such directory)")
        elif not os.listdir(d):
            missing.append(f"{d} (empty run directory)")
        elif not os.path.isfile(os.path.join(d, "runlog.csv")):
            missing.append(os.path.join(d, "runlog.csv"))
    if missing:
        raise MissingRunError("missing run inputs: " + ", ".join(missing))
    runs = []
    for d in run_dirs:
        log = RunLog.read_csv(os.path.join(d, "runlog.csv"))
        meta_path = os.path.join(d, "meta.json")
        if os.path.isfile(meta_path):
            with open(meta_path) as fh:
                log.meta = json.load(fh)
        runs.append((d, log))
    return runs


def bound_curve(meta: dict, ks: np.ndarray) -> np.ndarray:
    """gamma_rho^k (1 + log|A|) C / (1 - gamma) from run metadata."""
    g_rho, g, C = meta["gamma_rho"], meta["gamma"], meta["C"]
    return g_rho ** ks * (1.0 + math.log(meta["n_actions"])) * C / (1.0 - g)


def _label(d: str) -> str:
    return os.path.basename(os.path.normpath(d)) or d


def make_report(run_dirs, out_dir) -> dict:
    """Write gap_vs_iteration.png, gap_vs_samples.png and merged.csv into ``out_dir``."""
    runs = load_runs(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    curves = {}
    fig1, ax1 = plt.subplots(figsize=(6, 4))
    fig2, ax2 = plt.subplots(figsize=(6, 4))
    for d, log in runs:
        ks = log.column("k")
        gaps = log.gaps
        name = _label(d)
        # zero gaps cannot sit on a log axis; show them at the float floor
        ax1.semilogy(ks, np.maximum(gaps, 1e-16), marker="o", ms=3, label=name)
        entry = {"k": ks, "gap": gaps}
        if log.meta.get("mode") == "exact-pmd" and "gamma_rho" in log.meta:
            b = bound_curve(log.meta, ks)
            ax1.semilogy(ks, b, ls="--", color="gray", label=f"{name} bound")
            entry["bound"] = b
        ax2.plot(log.column("samples"), gaps, marker="o", ms=3, label=name)
        curves[name] = entry
    ax1.set_xlabel("iteration k")
    ax1.set_ylabel("optimality gap")
    ax1.legend(fontsize=7)
    ax2.set_xlabel("cumulative sample-oracle calls")
    ax2.set_ylabel("optimality gap")
    ax2.legend(fontsize=7)
    for fig, name in ((fig1, "gap_vs_iteration.png"), (fig2, "gap_vs_samples.png")):
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, name), dpi=120)
        plt.close(fig)
    with open(os.path.join(out_dir, "merged.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", *LOG_FIELDS])
        for d, log in runs:
            for r in log.rows:
                w.writerow([_label(d), *[r[f] for f in LOG_FIELDS]])
    return curves
