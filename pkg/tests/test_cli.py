import csv
import json

import numpy as np
import pytest

from npmdlab.cli import apply_override, ema, main, parse_seeds, sweep_spread
from npmdlab.npmd import RunLog

TINY = {"iterations_K": 2, "samples_per_action_N": 32, "blocks_M": 1, "layers_L": 1, "channels_J": 4,
        "critic_epochs": 2, "actor_epochs": 2, "gamma_rho": 0.9}
SMALL_ENV = {"name": "point-goal-circle", "n": 16, "step": 1, "embed_dim": 4}


def write_config(tmp_path, **sections):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(sections))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_helpers():
    assert parse_seeds("0,2,5") == [0, 2, 5]
    assert parse_seeds("1-3") == [1, 2, 3]
    assert parse_seeds(None) == [0]
    cfg = {}
    apply_override(cfg, "iterations_K=7")
    apply_override(cfg, "env.name=random")
    apply_override(cfg, "sweep.D_list=[8, 16]")
    assert cfg == {"npmd": {"iterations_K": 7}, "env": {"name": "random"}, "sweep": {"D_list": [8, 16]}}
    with pytest.raises(ValueError):
        apply_override(cfg, "novalue")


def test_ema_recursion():
    assert ema([1.0]) == 1.0
    assert ema([1.0, 0.0]) == pytest.approx(0.9)
    assert ema([2.0, 2.0, 2.0]) == pytest.approx(2.0)


def test_usage_errors(tmp_path, capsys):
    assert main(["--out", str(tmp_path)]) == 2
    cfg = write_config(tmp_path, npmd={"bogus": 1})
    assert main(["--command", "npmd", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit):
        main(["--command", "nope"])


def test_npmd_command_and_determinism(tmp_path):
    cfg = write_config(tmp_path, env=SMALL_ENV, npmd=TINY)
    for tag in ("a", "b"):
        assert main(["--command", "npmd", "--config", cfg, "--out", str(tmp_path / tag), "--seed", "0,1"]) == 0
    for s in (0, 1):
        a = (tmp_path / "a" / f"seed_{s}" / "runlog.csv").read_bytes()
        assert a == (tmp_path / "b" / f"seed_{s}" / "runlog.csv").read_bytes()
        assert (tmp_path / "a" / f"seed_{s}" / "timings.csv").exists()
        assert json.loads((tmp_path / "a" / f"seed_{s}" / "meta.json").read_text())["gamma_rho"] == 0.9
    log = RunLog.read_csv(tmp_path / "a" / "seed_0" / "runlog.csv")
    assert len(log.rows) == 3 and np.isnan(log.column("critic_loss")[-1])


def test_override_changes_run(tmp_path):
    cfg = write_config(tmp_path, env=SMALL_ENV, npmd=TINY)
    assert main(["--command", "npmd", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--override", "iterations_K=1"]) == 0
    assert len(read_csv(tmp_path / "o" / "seed_0" / "runlog.csv")) == 2


def test_exact_pmd_and_report(tmp_path):
    cfg = write_config(tmp_path, env={"name": "random", "n_states": 8, "n_actions": 2},
                       npmd={"iterations_K": 30})
    assert main(["--command", "exact-pmd", "--config", cfg, "--out", str(tmp_path / "ex"), "--seed", "0-1"]) == 0
    runs = [str(tmp_path / "ex" / "seed_0"), str(tmp_path / "ex" / "seed_1")]
    assert main(["--command", "report", "--out", str(tmp_path / "rep"), *runs]) == 0
    for name in ("gap_vs_iteration.png", "gap_vs_samples.png", "merged.csv"):
        assert (tmp_path / "rep" / name).stat().st_size > 0
    merged = read_csv(tmp_path / "rep" / "merged.csv")
    assert len(merged) == 62
    for r in merged:
        assert float(r["optimality_gap"]) <= float(r["bound"]) + 1e-9


def test_report_errors_name_the_input(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["--command", "report", "--out", str(tmp_path / "rep"), str(empty)]) == 2
    assert "empty" in capsys.readouterr().err
    partial = tmp_path / "partial"
    partial.mkdir()
    (partial / "meta.json").write_text("{}")
    assert main(["--command", "report", "--out", str(tmp_path / "rep"), str(partial)]) == 2
    assert "runlog.csv" in capsys.readouterr().err
    assert main(["--command", "report", "--out", str(tmp_path / "rep")]) == 2


def test_sampler_check_command(tmp_path):
    cfg = write_config(tmp_path, sampler={"n_samples": 20_000, "tv_tol": 0.05, "len_tol": 0.05})
    assert main(["--command", "sampler-check", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "sampler_check.csv")
    assert len(rows) == 2 and all(r["pass"] == "1" for r in rows)


def test_sampler_check_flags_failure(tmp_path):
    cfg = write_config(tmp_path, sampler={"n_samples": 50, "tv_tol": 1e-6, "len_tol": 1e-6})
    assert main(["--command", "sampler-check", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_spline_rate_command(tmp_path):
    cfg = write_config(tmp_path, spline={"d_list": [1], "p_list": [2, 3], "n_functions": 2})
    assert main(["--command", "spline-rate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "spline_rate.csv")) == 4


def test_lipschitz_report_command(tmp_path):
    cfg = write_config(tmp_path, lipschitz={"n_policies": 2})
    assert main(["--command", "lipschitz-report", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "lipschitz_report.csv")
    assert len(rows) == 4 and all(float(r["q_lip"]) <= float(r["bound"]) + 1e-9 for r in rows)


def test_sweep_single_cell_and_native_matches_npmd(tmp_path, monkeypatch):
    monkeypatch.setenv("NPMD_THREADS", "1")
    env = {k: v for k, v in SMALL_ENV.items() if k != "embed_dim"}
    cfg = write_config(tmp_path, env=env, npmd=TINY, sweep={"D_list": ["native"], "N_list": [32]})
    assert main(["--command", "resolution-sweep", "--config", cfg, "--out", str(tmp_path / "sw")]) == 0
    rows = read_csv(tmp_path / "sw" / "summary.csv")
    assert len(rows) == 1 and rows[0]["status"] == "ok" and rows[0]["D"] == "native"
    plain = write_config(tmp_path, env=env, npmd=TINY)
    assert main(["--command", "npmd", "--config", plain, "--out", str(tmp_path / "np")]) == 0
    a = (tmp_path / "sw" / "Dnative_N32_s0" / "runlog.csv").read_bytes()
    assert a == (tmp_path / "np" / "seed_0" / "runlog.csv").read_bytes()
    log = RunLog.read_csv(tmp_path / "np" / "seed_0" / "runlog.csv")
    assert float(rows[0]["final_gap"]) == log.gaps[-1]


def test_sweep_records_failed_cell(tmp_path, monkeypatch):
    monkeypatch.setenv("NPMD_THREADS", "1")
    env = {k: v for k, v in SMALL_ENV.items() if k != "embed_dim"}
    # D = 1 is too small for a convolution filter, so that cell fails and the other runs
    cfg = write_config(tmp_path, env=env, npmd=TINY, sweep={"D_list": [1, 4], "N_list": [32]})
    assert main(["--command", "resolution-sweep", "--config", cfg, "--out", str(tmp_path / "sw")]) == 1
    rows = read_csv(tmp_path / "sw" / "summary.csv")
    assert [r["status"] for r in rows] == ["failed", "ok"]
    assert rows[0]["error"]


def test_sweep_spread_definition():
    rows = [{"D": D, "N": 1, "seed": s, "status": "ok", "final_gap": g}
            for D, gs in [(8, [1.0, 2.0]), (32, [1.5, 2.5])] for s, g in enumerate(gs)]
    out = sweep_spread(rows)
    assert out["across_D_spread"] == pytest.approx(0.5) and out["within_D_spread"] == pytest.approx(1.0)
    assert out["pass"]
    rows[2]["final_gap"] = rows[3]["final_gap"] = 9.0
    assert not sweep_spread(rows)["pass"]
    assert np.isnan(sweep_spread([])["across_D_spread"])
