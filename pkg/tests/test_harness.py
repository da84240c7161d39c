import json
import subprocess
import sys

import numpy as np
import pytest

from ocil.estimator import ResidualSpec
from ocil.harness.cli import EXIT_ALL_FAILED, EXIT_CONFIG, EXIT_OK, main
from ocil.harness.config import ConfigError, ExperimentConfig, config_from_dict, parse_config
from ocil.harness.logio import read_csv, write_csv
from ocil.harness.plotting import band_statistics, emit_plots
from ocil.harness.runner import (CSV_FIELDS, Experiment, LogRow, TrialLog, baseline_pdp_gd, build_experiment,
                                 run_trial, run_trials, worker_count)
from ocil.models import AffineParamDynamics
from ocil.modes import SysIdMode, make_episodes
from ocil.ocp import rollout_open_loop

SMALL = {"environment": "cartpole", "mode": "sysid", "trials": 2, "offline_epochs": 1, "sigma": 0.05,
         "record_timing": False, "data": {"count": 2, "horizon": [5, 8]}}


def small(**kw) -> ExperimentConfig:
    raw = json.loads(json.dumps(SMALL))
    raw.update(kw)
    return config_from_dict(raw)


def write_config(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw), encoding="utf-8")
    return p


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path, {"environment": "cartpole", "mode": "sysid"}))
    assert cfg.estimator.p0 == 10.0 and cfg.offline_epochs == 20 and cfg.estimator.r_scale == 10.0
    assert cfg.dt == 0.05 and cfg.trials == 5 and cfg.data.horizon == [10, 20]
    assert parse_config(write_config(tmp_path, {"mode": "imitation"})).dt == 0.1


@pytest.mark.parametrize("raw, msg", [
    ({"sigma": -1}, "sigma must be ≥ 0"),
    ({"dt": 0}, "dt must be > 0"),
    ({"environment": "pendulum"}, "environment must be one of"),
    ({"trials": 0}, "trials must be ≥ 1"),
    ({"estimator": {"p0": -1}}, "estimator.p0"),
    ({"data": {"horizon": [5, 2]}}, "data.horizon"),
    ({"bogus": 1}, "unknown key bogus"),
    ({"estimator": {"bogus": 1}}, "unknown key estimator.bogus"),
    ({"schema_version": 2}, "schema_version"),
])
def test_config_validation_names_field(tmp_path, raw, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(write_config(tmp_path, raw))


def test_config_parse_error_has_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"mode": "sysid",\n "sigma": }', encoding="utf-8")
    with pytest.raises(ConfigError, match="line 2 column"):
        parse_config(p)
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.json")


def test_theta_star_dimension_checked():
    with pytest.raises(ConfigError, match="3 entries"):
        build_experiment(small(theta_star=[1.0, 0.1]))


def test_trials_deterministic_and_distinct(tmp_path):
    cfg = small()
    a, _ = run_trials(cfg)
    b, _ = run_trials(cfg)
    write_csv(a, tmp_path / "a.csv")
    write_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a[0].rows[0].loss != a[1].rows[0].loss
    other, _ = run_trials(small(seed=1))
    assert other[0].rows[0].loss != a[0].rows[0].loss


def test_worker_pool_matches_serial(tmp_path, monkeypatch):
    cfg = small()
    serial, _ = run_trials(cfg)
    monkeypatch.setenv("OCIL_THREADS", "2")
    assert worker_count(cfg) == 2
    pooled, _ = run_trials(cfg)
    write_csv(serial, tmp_path / "s.csv")
    write_csv(pooled, tmp_path / "p.csv")
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "p.csv").read_bytes()
    monkeypatch.setenv("OCIL_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count(cfg)


def test_rows_cover_every_data_point():
    cfg = small(trials=1)
    exp = build_experiment(cfg)
    lg = run_trial(cfg, 0, exp)
    N = exp.mode.data_points
    dps = [r.data_point for r in lg.rows]
    assert dps == list(range(N * 2 + 1))
    assert [r.phase for r in lg.rows].count("online") == N
    assert all(r.ocil_ms is None for r in lg.rows)
    assert all(r.loss is not None for r in lg.rows)


def test_timing_recorded_when_enabled():
    cfg = small(trials=1, record_timing=True)
    lg = run_trial(cfg, 0)
    assert all(r.ocil_ms >= 0 and r.gg_ms >= 0 and r.est_ms >= 0 for r in lg.rows[1:])


def test_csv_round_trip(tmp_path):
    logs, _ = run_trials(small(record_timing=True))
    logs[0].rows[1].lyapunov = None
    path = write_csv(logs, tmp_path / "t.csv")
    assert path.read_text(encoding="utf-8").splitlines()[0] == \
        "trial,phase,data_point,loss,residual_norm,theta_err,lyapunov,ocil_ms,gg_ms,est_ms"
    back = read_csv(path)
    assert [lg.rows for lg in back] == [lg.rows for lg in logs]


def test_csv_errors(tmp_path):
    with pytest.raises(ValueError, match="no rows"):
        write_csv([TrialLog(0)], tmp_path / "x.csv")
    (tmp_path / "h.csv").write_text("a,b\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unexpected header"):
        read_csv(tmp_path / "h.csv")
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x.csv").mkdir()
    with pytest.raises(OSError, match="x.csv"):
        write_csv([TrialLog(0, [LogRow(0, "init", 0, 1.0)])], tmp_path / "d" / "x.csv")


def _synthetic_log(trial, losses):
    return TrialLog(trial, [LogRow(trial, "init" if i == 0 else ("online" if i <= 2 else "offline"), i, v)
                            for i, v in enumerate(losses)])


def test_band_statistics_recompute():
    logs = [_synthetic_log(0, [4.0, 2.0, 1.0, 0.5]), _synthetic_log(1, [2.0, 2.0, 3.0, 0.5])]
    s = band_statistics(logs)
    assert s["data_point"] == [0, 1, 2, 3]
    np.testing.assert_allclose(s["mean"], [3.0, 2.0, 2.0, 0.5])
    np.testing.assert_allclose(s["std"], [1.0, 0.0, 1.0, 0.0])


def test_plot_files_and_sidecar(tmp_path):
    logs = [_synthetic_log(0, [4.0, 2.0, 1.0, 0.5]), _synthetic_log(1, [2.0, 2.0, 3.0, 0.5])]
    svg, side = emit_plots(logs, tmp_path / "loss")
    assert svg.stat().st_size > 0
    data = json.loads(side.read_text(encoding="utf-8"))
    assert data["ocil"] == band_statistics(logs) and data["online_end"] == 2
    one = emit_plots(logs[:1], tmp_path / "one")[1]
    assert json.loads(one.read_text(encoding="utf-8"))["ocil"]["std"] == [0.0] * 4
    with pytest.raises(ValueError, match="no rows"):
        emit_plots([TrialLog(0)], tmp_path / "none")


def test_baseline_zero_rate_keeps_loss():
    cfg = small(trials=1, baseline={"enabled": True, "learning_rate": 0.0})
    lg = baseline_pdp_gd(cfg, 0, iterations=3)
    assert len({r.loss for r in lg.rows}) == 1


def test_baseline_geometric_contraction():
    # x_{t+1} = theta, so the loss is T (theta - theta*)^2 with curvature T
    T, eta = 10, 0.01
    dyn = AffineParamDynamics([[0.0]], [[0.0]], D=[[1.0]])
    traj = rollout_open_loop(dyn, [0.0], np.zeros((T, 1)), [2.0])
    mode = SysIdMode(dyn, make_episodes([traj], ResidualSpec(1, 1), 0.0, np.random.default_rng(0), True),
                     np.array([2.0]))
    cfg = small(trials=1, estimator={"theta0": [1.0]}, baseline={"enabled": True, "learning_rate": eta})
    lg = baseline_pdp_gd(cfg, 0, Experiment(cfg, mode, np.array([2.0]), None, [traj]), iterations=100)
    # the ratio is exact until the loss nears round-off
    losses = np.array([r.loss for r in lg.rows])
    np.testing.assert_allclose(losses[1:41] / losses[:40], (1 - 2 * eta * T) ** 2, rtol=1e-9)
    np.testing.assert_allclose([r.theta_err for r in lg.rows], 0.8 ** np.arange(101), rtol=1e-9, atol=1e-15)
    assert lg.rows[-1].data_point == 100 * mode.data_points


def test_baseline_same_axis_as_learner():
    cfg = small(trials=1, sigma=0.0, baseline={"enabled": True, "learning_rate": 1e-4})
    exp = build_experiment(cfg)
    assert baseline_pdp_gd(cfg, 0, exp).rows[-1].data_point == run_trial(cfg, 0, exp).rows[-1].data_point


def test_baseline_cartpole_loss_non_increasing_over_50_iterations():
    cfg = small(trials=5, sigma=0.0, data={"count": 5, "horizon": [10, 20]},
                baseline={"enabled": True, "learning_rate": 1e-4})
    exp = build_experiment(cfg)
    for trial in range(cfg.trials):
        losses = [r.loss for r in baseline_pdp_gd(cfg, trial, exp, iterations=50).rows]
        assert all(y <= x for x, y in zip(losses, losses[1:])), f"trial {trial}: {losses[:6]}"


def test_cli_run_and_plot(tmp_path, capsys):
    cfg = write_config(tmp_path, dict(SMALL, baseline={"enabled": True}))
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--trials", "1", "--seed", "3", "--out", str(out)]) == EXIT_OK
    for name in ("trials.csv", "baseline.csv", "config.json", "loss.svg", "loss.json"):
        assert (out / name).exists()
    assert json.loads((out / "config.json").read_text(encoding="utf-8"))["seed"] == 3
    assert len(read_csv(out / "trials.csv")) == 1
    (out / "loss.svg").unlink()
    assert main(["plot", "--in", str(out)]) == EXIT_OK
    assert (out / "loss.svg").exists()
    assert "baseline" in json.loads((out / "loss.json").read_text(encoding="utf-8"))
    assert main(["plot", "--in", str(tmp_path / "nowhere")]) == EXIT_CONFIG


def test_cli_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {"sigma": -1})
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert "sigma must be ≥ 0" in capsys.readouterr().err
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--trials", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_cli_all_trials_failed(tmp_path, capsys):
    cfg = write_config(tmp_path, dict(SMALL, estimator={"theta0": [1.0, 0.1, 1e-12]}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_ALL_FAILED
    assert all(lg.rows[0].loss is None for lg in read_csv(tmp_path / "o" / "trials.csv"))
    raw = {"mode": "imitation", "trials": 1, "solver_tol": 1e-300, "data": {"count": 1, "horizon": [5, 5]}}
    assert main(["run", "--config", str(write_config(tmp_path, raw)), "--out", str(tmp_path / "p")]) == EXIT_ALL_FAILED
    assert "data generation failed" in capsys.readouterr().err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "ocil.harness.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify" in res.stdout


def test_shipped_configs_parse():
    from pathlib import Path
    paths = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json"))
    assert paths
    for p in paths:
        parse_config(p)
