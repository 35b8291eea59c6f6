import csv
import subprocess
import sys

import numpy as np
import pytest

from streamwsindy import harness, sparse
from streamwsindy.cli import main
from streamwsindy.harness import (CSV_HEAD, ConfigError, ExperimentConfig, format_config, load_config, offline_phase,
                                  parse_config_text, run_experiment, run_trial)
from streamwsindy.sims import preset, simulate, write_dataset
from streamwsindy.weakform import NotReady

SMALL = dict(problem="KS", K_mem=13, steps=60, trials=1)


def test_config_defaults():
    cfg = ExperimentConfig()
    assert (cfg.lambda0, cfg.dlambda, cfg.lambda_max) == (1e-4, 0.1, 0.1)
    assert (cfg.m, cfg.p, cfg.p_time) == (21, 11, 9)
    assert cfg.sigma_nr == (0.0,)


def test_config_text_round_trip(tmp_path):
    cfg = ExperimentConfig(problem="W2D", K_mem=17, sigma_nr=(0.0, 0.01), trials=3, stride=2, dt=0.01)
    path = tmp_path / "c.txt"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg


def test_config_parsing_errors():
    assert parse_config_text("# comment\nK_mem = 9  # odd\nsigma_nr=0, 0.01\n") == \
        {"K_mem": 9, "sigma_nr": (0.0, 0.01)}
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("K_mem=9\nkmem=3")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("K_mem=nine")
    with pytest.raises(ConfigError):
        parse_config_text("K_mem")


@pytest.mark.parametrize("kw", [dict(K_mem=4), dict(K_mem=3), dict(problem="heat"), dict(source="web"),
                                dict(source="directory"), dict(trials=0), dict(dlambda=1.5),
                                dict(lambda0=1.0), dict(step_mode="newton"), dict(threshold="soft"),
                                dict(method="dft")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_load_config_rejects_unknown_override():
    with pytest.raises(ConfigError):
        load_config(k_mem=5)


def test_not_ready_with_short_stream():
    cfg = ExperimentConfig(K_mem=5)
    with pytest.raises(NotReady):
        offline_phase(cfg, iter(list(simulate(preset("KS", steps=4)))), "KS")


def test_trial_deterministic():
    cfg = ExperimentConfig(**SMALL)
    a = run_trial(cfg, 0.01, 0)
    b = run_trial(cfg, 0.01, 0)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.column("lambda"), b.column("lambda"))
    c = run_trial(cfg, 0.01, 1)
    assert not np.array_equal(a.weights, c.weights)


def test_streaming_contracts():
    cfg = ExperimentConfig(**SMALL)
    r = run_trial(cfg, 0.001, 0)
    assert r.lstsq_online == 0
    assert r.peak_feature_bytes <= 8 * r.budget_doubles
    steps = r.column("step")
    assert np.all(np.diff(steps) == 1) and steps[0] == 0
    assert np.all(np.diff(r.column("t")) > 0)
    lam = r.column("lambda")
    assert np.all((lam > 0) & (lam <= cfg.lambda_max))
    assert len(r.rows) == cfg.steps - cfg.K_mem + 1


def test_experiment_outputs(tmp_path):
    cfg = ExperimentConfig(**SMALL, sigma_nr=(0.0,), out=str(tmp_path))
    res = run_experiment(cfg)
    trial = res.completed(0.0)[0]
    path = tmp_path / "KS_K13_s0_trial000.csv"
    with open(path) as fh:
        rows = list(csv.reader(fh))
    labels = (tmp_path / "library.txt").read_text().splitlines()[:-1]
    assert rows[0] == CSV_HEAD + labels
    assert len(rows) == len(trial.rows) + 1
    with open(tmp_path / "KS_K13_s0_aggregate.csv") as fh:
        agg = list(csv.DictReader(fh))
    np.testing.assert_array_equal([float(r["mean_tpr"]) for r in agg], trial.column("tpr"))
    np.testing.assert_array_equal([float(r["mean_e2"]) for r in agg], trial.column("e2"))
    assert load_config(tmp_path / "config.txt") == cfg


def test_w2d_aggregate_has_wavespeed(tmp_path):
    cfg = ExperimentConfig(problem="W2D", K_mem=5, steps=8, trials=1, m=10, out=str(tmp_path))
    run_experiment(cfg)
    with open(tmp_path / "W2D_K5_s0_aggregate.csv") as fh:
        head = next(csv.reader(fh))
    assert head[-4:] == ["c_true", "c_mean", "c_min", "c_max"]


def test_parallel_matches_serial():
    base = dict(SMALL, trials=2, sigma_nr=(0.01,))
    serial = run_experiment(ExperimentConfig(**base))
    par = run_experiment(ExperimentConfig(**base, workers=2))
    for a, b in zip(serial.trials[0.01], par.trials[0.01]):
        np.testing.assert_array_equal(a.weights, b.weights)


def test_partial_failure_warns(monkeypatch):
    real = harness.run_trial

    def flaky(cfg, sigma, trial, dataset=None):
        if trial == 1:
            raise FloatingPointError("boom")
        return real(cfg, sigma, trial, dataset)

    monkeypatch.setattr(harness, "run_trial", flaky)
    with pytest.warns(UserWarning, match="trial 1"):
        res = run_experiment(ExperimentConfig(**dict(SMALL, trials=2)))
    assert len(res.completed(0.0)) == 1
    assert res.trials[0.0][1].error.startswith("FloatingPointError")


def test_directory_source_matches_simulation(tmp_path):
    write_dataset(preset("KS", steps=30), tmp_path)
    sim = run_trial(ExperimentConfig(**dict(SMALL, steps=30)), 0.0, 0)
    disk = run_trial(ExperimentConfig(**dict(SMALL, steps=None), source="directory", data_dir=str(tmp_path)), 0.0, 0)
    np.testing.assert_array_equal(sim.weights, disk.weights)


def test_lstsq_counter_counts():
    before = sparse.lstsq.calls
    sparse.lstsq(np.eye(2), np.ones(2))
    assert sparse.lstsq.calls == before + 1


# --- command line -----------------------------------------------------------

def test_cli_identify_from_directory(tmp_path, capsys):
    write_dataset(preset("KS", steps=40), tmp_path / "data")
    code = main(["identify", "--data-dir", str(tmp_path / "data"), "--k-mem", "13",
                 "--out", str(tmp_path / "out")])
    assert code == 0
    out = capsys.readouterr().out
    assert out.startswith("u_t = ")
    assert (tmp_path / "out" / "identify.csv").exists()


def test_cli_identify_from_stdin(tmp_path):
    from streamwsindy.grid import encode_snapshot
    payload = b"".join(encode_snapshot(f.values, f.grid.dx) for f in simulate(preset("KS", steps=20)))
    proc = subprocess.run([sys.executable, "-m", "streamwsindy", "identify", "--k-mem", "13",
                           "--dt", "0.586"], input=payload, capture_output=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith(b"u_t = ")


@pytest.mark.parametrize("argv", [["experiment", "--k-mem", "4"], ["experiment", "--bogus-key", "1"],
                                  ["identify", "--k-mem", "13"], ["simulate"]])
def test_cli_config_errors(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse rejects unknown flags itself
        code = exc.code
    assert code == 2


def test_cli_experiment_and_simulate(tmp_path, capsys):
    assert main(["simulate", "--steps", "5", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "manifest.txt").exists()
    cfg = tmp_path / "c.txt"
    cfg.write_text("problem=KS\nK_mem=13\nsteps=40\ntrials=1\n")
    assert main(["experiment", "--config", str(cfg)]) == 0
    assert "1 reached and held" in capsys.readouterr().out


def test_cli_verify(capsys):
    assert main(["verify"]) == 0
    assert "FAIL" not in capsys.readouterr().out
