"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are repeated in the "acceptance criteria" section of the pytest summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from resmppi import harness
from resmppi.cli import EXIT_OK, main
from resmppi.envs import make_env
from resmppi.nn import ACTIVATIONS, Mlp
from resmppi.oracle import (augmented_optimal_action, load_fixtures, make_fixture_suite, point_mass_fixture,
                            run_suite)
from resmppi.planner import (Planner, PlannerConfig, PriorController, compute_weights, receding_horizon_run,
                             sample_noise, score_rollouts)
from resmppi.presets import planner_preset
from resmppi.priors import GaussianPolicy

from conftest import CONFIGS, DATA, load_packaged_config, write_config

FIXTURES = CONFIGS.parent / "oracle_fixtures.json"


# ---------------------------------------------------------------- 1, 2: tabular oracle

def test_c01_sequence_factorization(record_criterion):
    suite = load_fixtures(FIXTURES)
    seq = [fx for fx in suite["fixtures"] if fx["kind"] == "sequence"]
    t0 = time.perf_counter()
    results = run_suite({"fixtures": seq})
    dt = time.perf_counter() - t0
    shapes_ok = all(len(fx["mdp"]["transition"]) <= 6 and len(fx["mdp"]["transition"][0]) <= 4 and fx["T"] <= 4
                    for fx in seq)
    worst = max(r.measured for r in results)
    ok = len(seq) >= 100 and shapes_ok and worst <= 1e-10 and dt < 10
    record_criterion(1, ok, f"{len(seq)} fixtures, max TV {worst:.2e} (<= 1e-10), {dt:.2f} s (< 10 s)")
    assert ok


def test_c02_rql_equivalence(record_criterion):
    suite = load_fixtures(FIXTURES)
    rql = [fx for fx in suite["fixtures"] if fx["kind"] == "rql"]
    t0 = time.perf_counter()
    results = run_suite({"fixtures": rql})
    dt = time.perf_counter() - t0
    matched = [r for r, fx in zip(results, rql) if fx["expect"] == "pass"]
    assert all(fx["omega_prime"] == fx["alpha"] for fx in rql if fx["expect"] == "pass")
    control = [r for r in results if r.expect == "fail"]
    worst = max(r.measured for r in matched)
    ctrl = min(r.measured for r in control)
    ok = worst <= 1e-8 and len(control) >= 1 and ctrl > 1e-3 and dt < 10
    record_criterion(2, ok, f"{len(matched)} fixtures at omega'=alpha, max TV {worst:.2e} (<= 1e-8); "
                            f"mismatch control TV {ctrl:.3f} (> 1e-3); {dt:.2f} s")
    assert ok


# ---------------------------------------------------------------- 3: weights

def test_c03_softmax_weight_algebra(record_criterion):
    t0 = time.perf_counter()
    lam = 0.37
    errs = []
    w = compute_weights(np.full(16, -4.25), lam).weights
    errs.append(np.max(np.abs(w - 1 / 16)))
    w = compute_weights(np.array([0.0, lam * math.log(2.0)]), lam).weights
    errs.append(np.max(np.abs(w - [1 / 3, 2 / 3])))
    # dyadic scores stay exact under every shift, so weights must agree to rounding
    s = np.random.default_rng(0).integers(-64, 64, size=200) / 8.0
    base = compute_weights(s, 1.0).weights
    for c in (1.0, -1.0, 1e6, -1e6):
        errs.append(np.max(np.abs(compute_weights(s + c, 1.0).weights - base)))
    dt = time.perf_counter() - t0
    worst = float(max(errs))
    ok = worst <= 1e-12
    record_criterion(3, ok, f"uniform, ln2-gap and shift checks, max deviation {worst:.1e} (<= 1e-12), {dt * 1e3:.1f} ms")
    assert ok


# ---------------------------------------------------------------- 4: gradients

def _gradcheck(seed, h=1e-6):
    rng = np.random.default_rng(1000 + seed)
    dims = [int(d) for d in rng.integers(1, 9, size=int(rng.integers(2, 5)))]
    net = Mlp.initialize(dims, ACTIVATIONS[seed % len(ACTIVATIONS)], rng)
    for b in net.biases:
        b[:] = rng.normal(scale=0.5, size=b.shape)
    x = rng.normal(size=(int(rng.integers(1, 6)), dims[0]))
    c = rng.normal(size=(len(x), dims[-1]))
    _, cache = net.forward_cache(x)
    grads, _ = net.backward(cache, c)
    worst = 0.0
    for p, g in zip(net.params, grads):
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = float(np.sum(c * net.forward(x)))
            p[i] = old - h
            lm = float(np.sum(c * net.forward(x)))
            p[i] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-6))
    return worst


def test_c04_gradient_correctness(record_criterion):
    t0 = time.perf_counter()
    errs = [_gradcheck(k) for k in range(50)]
    dt = time.perf_counter() - t0
    worst = max(errs)
    ok = worst < 1e-4 and dt < 30
    record_criterion(4, ok, f"50 MLP fixtures, max relative error {worst:.1e} (< 1e-4), {dt:.2f} s (< 30 s)")
    assert ok


# ---------------------------------------------------------------- 5: planner vs oracle

def test_c05_planner_matches_oracle(record_criterion):
    t0 = time.perf_counter()
    fx = point_mass_fixture()
    best, row = augmented_optimal_action(fx.mdp, fx.prior_solution, fx.alpha, fx.alpha, fx.x0)
    preset = planner_preset("desk/point_mass_oracle")
    assert preset["horizon"] == fx.horizon and preset["omega_prime"] == fx.alpha
    planner = Planner(PlannerConfig("residual", **preset), fx.env, fx.prior)
    ay = fx.mdp.actions[:, 1]
    counts = np.zeros(len(ay), dtype=int)
    for k in range(2000):
        planner.reseed(k)
        u = fx.env.clamp(planner.plan(fx.x0)[0])
        counts[np.argmin(np.abs(u[1] - ay))] += 1
    dt = time.perf_counter() - t0
    mode = int(np.argmax(counts))
    ok = mode == best and dt < 120
    record_criterion(5, ok, f"planner modal first action a_y={ay[mode]:+.1f} (counts {counts.tolist()}), "
                            f"oracle argmax a_y={ay[best]:+.1f}; {dt:.1f} s (< 120 s)")
    assert ok


# ---------------------------------------------------------------- 6: variant coincidences

def test_c06_variant_coincidences(record_criterion):
    t0 = time.perf_counter()
    env = make_env("point_mass", omega=5.0)
    prior = GaussianPolicy.linear([[-0.5, 0, -1, 0], [0, -0.5, 0, -1]], [1.0, 0.0], [0.3, 0.3])
    x0 = np.array([0.2, -0.1, 0.5, 0.3])
    diffs = []
    for seed in range(5):
        base = PlannerConfig("residual", 128, 6, 0.5, 0.2, 0.9, omega_prime=0.0, omega=5.0)
        noise = sample_noise(base, np.random.default_rng(seed), 2)
        nominal = np.random.default_rng(seed + 100).uniform(-1, 1, size=(6, 2))

        def score(variant, **kw):
            cfg = PlannerConfig(variant, 128, 6, 0.5, 0.2, 0.9, omega=5.0, **kw)
            return score_rollouts(cfg, env, prior, env.batch_step, x0, nominal, noise).scores

        diffs.append(np.max(np.abs(score("residual", omega_prime=0.0) - score("greedy"))))
        diffs.append(np.max(np.abs(score("valued", terminal_estimator=lambda x: np.zeros(len(x))) - score("guided"))))
    dt = time.perf_counter() - t0
    worst = float(max(diffs))
    ok = worst <= 1e-12
    record_criterion(6, ok, f"residual(omega'=0)=greedy and valued(V=0)=guided on shared noise, "
                            f"max |dS| {worst:.1e} (<= 1e-12), {dt * 1e3:.0f} ms")
    assert ok


# ---------------------------------------------------------------- 7: prior recovery

def test_c07_prior_recovery(record_criterion):
    t0 = time.perf_counter()
    env = make_env("point_mass", omega=5.0)
    priors = {
        "constant": GaussianPolicy.constant([1.0, 0.0], [0.3, 0.3]),
        "feedback": GaussianPolicy.linear([[-0.5, 0, -1, 0], [0, -0.5, 0, -1]], [1.0, 0.5], [0.3, 0.3]),
    }
    devs = {}
    for name, prior in priors.items():
        preset = planner_preset("desk/point_mass")
        preset["omega_prime"] = 1e9
        planner = Planner(PlannerConfig("residual", **preset, omega=5.0), env, prior)
        planner.reseed(0)
        x0 = np.array([0.0, 0.0, 0.3, -0.2])
        plan_traj, _ = receding_horizon_run(planner, env, x0, 50)
        prior_traj, _ = receding_horizon_run(PriorController(prior), env, x0, 50)
        devs[name] = float(np.max(np.abs(plan_traj.actions - prior_traj.actions)))
    dt = time.perf_counter() - t0
    worst = max(devs.values())
    ok = worst < 1e-3 and dt < 30
    shown = ", ".join(f"{k} {v:.1e}" for k, v in devs.items())
    record_criterion(7, ok, f"omega'=1e9, max action deviation from prior mode: {shown} (< 1e-3), {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 8: learned dynamics

def _mean_total(out_dir):
    for line in (Path(out_dir) / "metrics.csv").read_text().splitlines():
        parts = line.split(",")
        if parts[0] == "total_reward":
            return float(parts[1])
    raise AssertionError("total_reward missing from metrics table")


def test_c08_dynamics_pipeline(record_criterion, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    t0 = time.perf_counter()
    cfg = load_packaged_config("point_mass_learned.json")
    cfg["run"]["output_dir"] = "learned"
    learned = write_config(tmp_path / "learned.json", cfg)
    assert main(["train-dynamics", "--config", str(learned)]) == EXIT_OK
    assert main(["run", "--config", str(learned)]) == EXIT_OK
    true_cfg = json.loads(json.dumps(cfg))
    true_cfg["dynamics"] = {"use_true_dynamics": True}
    true_cfg["run"]["output_dir"] = "true"
    assert main(["run", "--config", str(write_config(tmp_path / "true.json", true_cfg))]) == EXIT_OK
    dt = time.perf_counter() - t0
    err = json.loads((tmp_path / "learned" / "training_report.json").read_text())["heldout_rms_error"]
    r_learned, r_true = _mean_total("learned"), _mean_total("true")
    change = abs(r_learned - r_true) / abs(r_true)
    ok = max(err) < 1e-3 and change < 0.05 and dt < 300
    record_criterion(8, ok, f"held-out 8-step error per dim {[f'{e:.1e}' for e in err]} (< 1e-3); "
                            f"total reward learned {r_learned:.3f} vs true {r_true:.3f}, change {100 * change:.3f}% "
                            f"(< 5%); {dt:.0f} s (< 300 s)")
    assert ok


# ---------------------------------------------------------------- 9: car customization

def _episode_means(path):
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split(",")
    vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return {c: float(vals[:, i].mean()) for i, c in enumerate(cols)}


def test_c09_offcourse_customization(record_criterion, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    t0 = time.perf_counter()
    cfg = load_packaged_config("car_offcourse.json")
    cfg["run"]["output_dir"] = "car"
    path = write_config(tmp_path / "car.json", cfg)
    prior_cfg = json.loads(json.dumps(cfg))
    prior_cfg["planner"] = {"variant": "prior"}
    prior_cfg["run"]["output_dir"] = "prior"
    assert main(["run", "--config", str(write_config(tmp_path / "prior.json", prior_cfg))]) == EXIT_OK
    assert main(["train-dynamics", "--config", str(path)]) == EXIT_OK
    assert main(["run", "--config", str(path)]) == EXIT_OK
    assert main(["fewshot", "--config", str(path)]) == EXIT_OK
    dt = time.perf_counter() - t0
    prior = _episode_means("prior/episodes.csv")
    zero = _episode_means("car/episodes.csv")
    n_iter = cfg["run"]["fewshot_iterations"]
    few = _episode_means(f"car/iteration_{n_iter:02d}/episodes.csv")
    reduction = 1 - zero["off_course_steps"] / prior["off_course_steps"]
    lap_increase = zero["lap_time_steps"] / prior["lap_time_steps"] - 1
    laps_done = min(prior["lap_time_steps"], zero["lap_time_steps"], few["lap_time_steps"]) > 0
    ok = (reduction >= 0.8 and lap_increase <= 0.10 and laps_done
          and few["off_course_steps"] <= zero["off_course_steps"] and dt < 600)
    record_criterion(9, ok, f"off-course steps/episode prior {prior['off_course_steps']:.2f} -> zero-shot "
                            f"{zero['off_course_steps']:.2f} ({100 * reduction:.1f}% reduction, >= 80%), few-shot "
                            f"{few['off_course_steps']:.2f} (<= zero-shot); lap steps {prior['lap_time_steps']:.1f} -> "
                            f"{zero['lap_time_steps']:.1f} ({100 * lap_increase:+.1f}%, <= +10%); {dt:.0f} s (< 600 s)")
    assert ok


# ---------------------------------------------------------------- 10: comparative ordering

def test_c10_comparative_ordering(record_criterion, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    ref = json.loads((DATA / "reference_runs.json").read_text())
    t0 = time.perf_counter()
    means = {}
    for variant in ("residual", "greedy", "guided"):
        cfg = load_packaged_config("point_mass_customization.json")
        assert cfg["run"]["n_episodes"] == ref["n_episodes"] == 200
        cfg["planner"]["variant"] = variant
        cfg["run"]["output_dir"] = variant
        assert main(["run", "--config", str(write_config(tmp_path / f"{variant}.json", cfg))]) == EXIT_OK
        means[variant] = _mean_total(variant)
    dt = time.perf_counter() - t0
    refm = ref["mean_total_reward"]
    checks = []
    for other in ("greedy", "guided"):
        floor = ref["margin_fraction"] * (refm["residual"] - refm[other])
        margin = means["residual"] - means[other]
        checks.append((other, margin, floor, margin >= floor and margin >= 0))
    ok = all(c[-1] for c in checks) and dt < 600
    shown = "; ".join(f"residual-{o} {m:+.2f} (>= {f:.2f})" for o, m, f, _ in checks)
    record_criterion(10, ok, f"mean total reward residual {means['residual']:.2f}, greedy {means['greedy']:.2f}, "
                             f"guided {means['guided']:.2f}; {shown}; {dt:.1f} s (< 600 s)")
    assert ok


# ---------------------------------------------------------------- 11: determinism

def _small_configs():
    pm = load_packaged_config("point_mass_learned.json")
    pm["dynamics"].update(n_samples=1000, heldout_samples=200)
    pm["dynamics"]["train"].update(steps=60)
    pm["dynamics"]["finetune"] = {"steps": 20, "batch_size": 32, "learning_rate": 1e-3}
    pm["run"].update(n_episodes=3, n_steps=20, fewshot_iterations=1)
    car = load_packaged_config("car_offcourse.json")
    car["dynamics"].update(n_samples=600, heldout_samples=200)
    car["dynamics"]["train"].update(steps=30, hidden=[16, 16])
    car["dynamics"]["finetune"].update(steps=10)
    car["planner"].update(n_samples=64)
    car["run"].update(n_episodes=2, n_steps=30, fewshot_iterations=1)
    return {"pm": pm, "car": car}


def _run_all(root, configs):
    root.mkdir()
    for name, cfg in configs.items():
        cfg = json.loads(json.dumps(cfg))
        cfg["run"]["output_dir"] = str(root / name)
        path = write_config(root / f"{name}.json", cfg)
        for cmd in ("train-dynamics", "run", "fewshot"):
            assert main([cmd, "--config", str(path)]) == EXIT_OK
    oracle_cfg = write_config(root / "oracle.json", {"run": {"seed": 0, "output_dir": str(root / "oracle")}})
    assert main(["oracle-check", "--config", str(oracle_cfg)]) == EXIT_OK
    files = {}
    for manifest in sorted(root.glob("*/manifest-*.json")):
        out = manifest.parent
        files[str(manifest.relative_to(root))] = manifest.read_bytes()
        for rel in json.loads(manifest.read_text())["outputs"]:
            files[str((out / rel).relative_to(root))] = (out / rel).read_bytes()
    return files


def test_c11_determinism(record_criterion, tmp_path):
    t0 = time.perf_counter()
    configs = _small_configs()
    a = _run_all(tmp_path / "a", configs)
    b = _run_all(tmp_path / "b", configs)
    dt = time.perf_counter() - t0
    differ = sorted(k for k in a if a[k] != b.get(k))
    models = [k for k in a if k.endswith(".bin")]
    tables = [k for k in a if k.endswith(".csv")]
    ok = not differ and set(a) == set(b) and len(models) >= 4 and len(tables) >= 4
    record_criterion(11, ok, f"4 commands rerun with identical config+seed: {len(models)} model/data files and "
                             f"{len(tables)} tables byte-identical ({len(differ)} differ); {dt:.0f} s")
    assert ok, differ
