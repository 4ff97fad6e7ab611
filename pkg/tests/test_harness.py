import json
import shutil

import numpy as np
import pytest

from resmppi import harness
from resmppi.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_VIOLATION, main
from resmppi.oracle import make_fixture_suite, save_fixtures

from conftest import CONFIGS, DATA, write_config


def pm_config(**run):
    cfg = json.loads((DATA / "golden_point_mass.json").read_text())
    cfg["run"].update(run)
    return cfg


def test_packaged_configs_validate():
    for path in sorted(CONFIGS.glob("*.json")):
        harness.load_config(path)


def test_unknown_keys_are_rejected(tmp_path):
    for block, key in [("planner", "lambda"), ("run", "episodes"), ("env", "mass"), ("dynamics", "lr")]:
        cfg = pm_config()
        cfg.setdefault(block, {})[key] = 1
        with pytest.raises(harness.ConfigError, match="unknown key"):
            harness.validate_config(cfg)
    cfg = pm_config()
    cfg["extra"] = {}
    with pytest.raises(harness.ConfigError):
        harness.validate_config(cfg)


def test_validation_errors():
    cfg = pm_config()
    del cfg["run"]["seed"]
    with pytest.raises(harness.ConfigError, match="seed"):
        harness.validate_config(cfg)
    for patch in ({"planner": {"variant": "mppi"}}, {"prior": {"type": "gp"}}, {"env": {"id": "cartpole"}},
                  {"run": {"seed": 0, "save_trajectories": "some"}}, {"planner": {"preset": "desk/nope"}}):
        cfg = pm_config()
        for k, v in patch.items():
            cfg[k] = v
        with pytest.raises(harness.ConfigError):
            harness.validate_config(cfg)


def test_preset_merge_and_override():
    cfg = harness.validate_config({"env": {"id": "point_mass"}, "prior": {"type": "constant", "mean": [0, 0],
                                   "std": [1, 1]}, "planner": {"preset": "desk/point_mass", "horizon": 5},
                                   "run": {"seed": 0}})
    assert cfg["planner"]["horizon"] == 5
    assert cfg["planner"]["n_samples"] == 256


def test_config_hash_depends_on_data_blocks_only(tmp_path):
    a = harness.validate_config(pm_config())
    b = harness.validate_config(pm_config(n_episodes=9, output_dir=str(tmp_path)))
    assert harness.config_hash(a) == harness.config_hash(b)
    c = pm_config()
    c["env"]["omega"] = 1.0
    assert harness.config_hash(harness.validate_config(c)) != harness.config_hash(a)


def test_track_file_hashed_by_content(tmp_path):
    src = CONFIGS.parent / "oval.track"
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        shutil.copy(src, tmp_path / d / "t.track")
    cfgs = [harness.validate_config({"env": {"id": "car", "track_file": "t.track"},
                                     "prior": {"type": "pure_pursuit", "std": [0.05, 0.5]}, "run": {"seed": 0}},
                                    base_dir=tmp_path / d) for d in ("a", "b")]
    assert harness.config_hash(cfgs[0]) == harness.config_hash(cfgs[1])


def test_golden_trajectory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = write_config(tmp_path / "g.json", pm_config(output_dir="out"))
    assert main(["run", "--config", str(path)]) == EXIT_OK
    produced = (tmp_path / "out" / "trajectories" / "episode_0000.csv").read_bytes()
    assert produced == (DATA / "golden_point_mass.csv").read_bytes()


def test_trajectory_round_trip(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = harness.validate_config(pm_config(output_dir="out", n_episodes=2, save_trajectories="all"))
    rows, agg = harness.cmd_run(cfg)
    cols, vals = harness.read_trajectory(tmp_path / "out" / "trajectories" / "episode_0001.csv")
    assert cols[0] == "step" and "px[m]" in cols and cols[-1] == "degraded[flag]"
    assert vals.shape == (12, len(cols))
    basic = vals[:, cols.index("basic_reward[-]")]
    assert basic.sum() == pytest.approx(rows[1]["basic_reward"], abs=1e-7)
    assert agg["total_reward"][2] == 2


def test_manifest_contents(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = write_config(tmp_path / "g.json", pm_config(output_dir="out", stream_diagnostics=True))
    assert main(["run", "--config", str(path), "--seed", "3"]) == EXIT_OK
    man = json.loads((tmp_path / "out" / "manifest-run.json").read_text())
    assert man["tool"] == "resmppi" and man["seed"] == 3 and man["command"] == "run"
    assert len(man["config_hash"]) == 16
    assert set(man["outputs"]) == {"episodes.csv", "metrics.csv", "trajectories/episode_0000.csv",
                                   "diagnostics.jsonl"}
    lines = (tmp_path / "out" / "diagnostics.jsonl").read_text().splitlines()
    assert len(lines) == 12 and json.loads(lines[0])["variant"] == "residual"


def test_zero_steps_run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = harness.validate_config(pm_config(output_dir="out", n_steps=0))
    rows, agg = harness.cmd_run(cfg)
    assert rows[0]["n_steps"] == 0 and agg["total_reward"][0] == 0.0
    cols, vals = harness.read_trajectory(tmp_path / "out" / "trajectories" / "episode_0000.csv")
    assert vals.shape == (0, len(cols))


def test_prior_variant_runs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = pm_config(output_dir="out")
    cfg["planner"] = {"variant": "prior"}
    rows, _ = harness.cmd_run(harness.validate_config(cfg))
    assert rows[0]["total_reward"] == pytest.approx(5 * sum(0.1 * t - 0.1 for t in range(12)))


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    bad = pm_config()
    bad["planner"]["lambda"] = 1.0
    assert main(["run", "--config", str(write_config(tmp_path / "bad.json", bad))]) == EXIT_INVALID
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", "--config", str(tmp_path / "broken.json")]) == EXIT_INVALID
    true_dyn = pm_config(output_dir="out")
    assert main(["train-dynamics", "--config", str(write_config(tmp_path / "t.json", true_dyn))]) == EXIT_INVALID
    assert main(["fewshot", "--config", str(tmp_path / "t.json")]) == EXIT_INVALID
    learned = pm_config(output_dir="nomodel")
    learned["dynamics"] = {"use_true_dynamics": False}
    assert main(["run", "--config", str(write_config(tmp_path / "l.json", learned))]) == EXIT_IO


def test_oracle_check_cli(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    good = write_config(tmp_path / "ok.json", {"run": {"seed": 0, "output_dir": "o1"}})
    assert main(["oracle-check", "--config", str(good)]) == EXIT_OK
    assert "fixtures ok" in capsys.readouterr().out
    report = (tmp_path / "o1" / "oracle_report.csv").read_text().splitlines()
    assert report[0].startswith("fixture,kind") and len(report) == 1 + 122

    suite = make_fixture_suite(n_prop=1, n_rql=1)
    suite["fixtures"][-1]["omega_prime"] = suite["fixtures"][-1]["alpha"]
    save_fixtures(suite, tmp_path / "fx.json")
    bad = write_config(tmp_path / "bad.json", {"oracle": {"fixtures": "fx.json"}, "run": {"seed": 0, "output_dir": "o2"}})
    assert main(["oracle-check", "--config", str(bad)]) == EXIT_VIOLATION
    assert "rql-omega-mismatch" in capsys.readouterr().err

    save_fixtures({"format": "resmppi-oracle-fixtures/1", "fixtures": []}, tmp_path / "empty.json")
    empty = write_config(tmp_path / "empty_cfg.json", {"oracle": {"fixtures": "empty.json"},
                                                        "run": {"seed": 0, "output_dir": "o3"}})
    assert main(["oracle-check", "--config", str(empty)]) == EXIT_INVALID


def learned_pm_config(out, steps=40):
    cfg = pm_config(output_dir=out, n_episodes=2, n_steps=8)
    cfg["dynamics"] = {"n_samples": 300, "heldout_samples": 100, "exploration_sigma": 0.5, "heldout_horizon": 4,
                       "train": {"window": 4, "batch_size": 16, "steps": steps, "hidden": [8], "learning_rate": 0.01},
                       "finetune": {"window": 4, "batch_size": 16, "steps": 10, "learning_rate": 0.001}}
    return cfg


def test_train_and_fewshot_pipeline(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = write_config(tmp_path / "l.json", learned_pm_config("out"))
    assert main(["train-dynamics", "--config", str(path)]) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "training_report.json").read_text())
    assert rep["n_transitions"] == 300 and len(rep["heldout_rms_error"]) == 4
    assert main(["run", "--config", str(path)]) == EXIT_OK
    assert main(["fewshot", "--config", str(path), "--iterations", "2"]) == EXIT_OK
    for it in range(3):
        assert (tmp_path / "out" / f"iteration_{it:02d}" / "metrics.csv").exists()
    table = (tmp_path / "out" / "fewshot_metrics.csv").read_text().splitlines()
    assert table[0] == "iteration,metric,mean,std,n"
    # iteration 0 evaluates the unmodified model, like the run command
    run_metrics = (tmp_path / "out" / "metrics.csv").read_text()
    assert (tmp_path / "out" / "iteration_00" / "metrics.csv").read_text() == run_metrics

    other = learned_pm_config("out")
    other["dynamics"]["exploration_sigma"] = 0.1
    assert main(["fewshot", "--config", str(write_config(tmp_path / "o.json", other))]) == EXIT_INVALID


def test_fewshot_zero_iterations_equals_run(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = harness.validate_config(learned_pm_config("out", steps=5))
    harness.cmd_train_dynamics(cfg)
    _, agg = harness.cmd_run(cfg)
    history, sizes = harness.cmd_fewshot(cfg, iterations=0)
    assert history == [(0, agg)] and sizes == [300]


def test_insufficient_data_exit_code(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = learned_pm_config("out")
    cfg["dynamics"]["n_samples"] = 10
    assert main(["train-dynamics", "--config", str(write_config(tmp_path / "s.json", cfg))]) == EXIT_INVALID


def test_corrupt_model_exit_code(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / "model.bin").write_bytes(b"garbage!" * 4)
    cfg = learned_pm_config("out")
    assert main(["run", "--config", str(write_config(tmp_path / "c.json", cfg))]) == EXIT_INVALID


def test_aggregate_uses_population_std():
    agg = harness.aggregate([{"episode": 0, "total_reward": 1.0}, {"episode": 1, "total_reward": 3.0}])
    assert agg["total_reward"] == (2.0, 1.0, 2)
    assert harness._fmt(np.float64(0.5)) == "0.500000000" and harness._fmt(float("nan")) == "nan"


def test_prior_variant_needs_no_model(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = learned_pm_config("nomodel")
    cfg["planner"] = {"variant": "prior"}
    assert main(["run", "--config", str(write_config(tmp_path / "p.json", cfg))]) == EXIT_OK
