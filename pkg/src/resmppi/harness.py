"""Experiment pipeline: dynamics training, zero-shot runs, few-shot fine-tuning, oracle checks.

An experiment is one JSON file with the blocks ``env``, ``prior``, ``dynamics``,
``planner`` and ``run`` (plus ``oracle`` for the fixture check). Unknown keys are
errors. Relative input paths (track, weights, model, dataset, fixtures) are resolved
against the directory of the config file; ``run.output_dir`` is relative to the
working directory.
Every output is a deterministic function of the config and the seed.
"""

from __future__ import annotations

import csv
import hashlib
import inspect
import json
import math
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, kernels, oracle
from .dynamics import (ConfigHashMismatch, LearnedDynamics, TrainConfig, TransitionDataset, collect_rollouts,
                       finetune_online, heldout_error, train_dynamics)
from .envs import Car, Pendulum, PointMass, make_env
from .nn import Mlp
from .planner import VARIANTS, Planner, PlannerConfig, PriorController, receding_horizon_run
from .presets import planner_preset
from .priors import GaussianPolicy, pure_pursuit_policy

ENV_CLASSES = {"point_mass": PointMass, "pendulum": Pendulum, "car": Car}
BLOCKS = ("env", "prior", "dynamics", "planner", "run", "oracle")
PRIOR_KEYS = {
    "constant": {"mean", "std"},
    "linear_feedback": {"gain", "bias", "std"},
    "pure_pursuit": {"std", "lookahead", "target_speed", "speed_gain"},
    "mlp": {"weights", "log_std"},
}
DYNAMICS_KEYS = {"use_true_dynamics", "model_file", "dataset_file", "n_samples", "heldout_samples",
                 "exploration_sigma", "capacity", "heldout_horizon", "train", "finetune", "finetune_new_only"}
PLANNER_KEYS = {"variant", "preset", "n_samples", "horizon", "sigma", "temperature", "gamma", "omega_prime",
                "omega", "top_ratio", "include_nominal", "terminal_estimator"}
RUN_KEYS = {"n_episodes", "n_steps", "seed", "output_dir", "save_trajectories", "stream_diagnostics",
            "fewshot_iterations"}
ORACLE_KEYS = {"fixtures"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


class OracleViolation(RuntimeError):
    def __init__(self, failures):
        names = ", ".join(f"{r.name} (TV {r.measured:.3e}, tol {r.tolerance:.0e}, expect {r.expect})" for r in failures)
        super().__init__(f"{len(failures)} oracle fixture(s) violated: {names}")
        self.failures = failures


# ------------------------------------------------------------------ config

def _check_keys(block, allowed, where):
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def load_config(path):
    path = Path(path)
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return validate_config(cfg, base_dir=path.parent)


def validate_config(cfg, base_dir="."):
    """Check block and key names, fill defaults and resolve relative paths."""
    cfg = json.loads(json.dumps(cfg))
    _check_keys(cfg, BLOCKS, "config")
    base_dir = Path(base_dir)

    def resolve(p):
        return str((base_dir / p).resolve()) if p is not None else None

    if "oracle" in cfg:
        _check_keys(cfg["oracle"], ORACLE_KEYS, "oracle")
        if "fixtures" in cfg["oracle"]:
            cfg["oracle"]["fixtures"] = resolve(cfg["oracle"]["fixtures"])
    run = cfg.setdefault("run", {})
    _check_keys(run, RUN_KEYS, "run")
    if "seed" not in run:
        raise ConfigError("run: 'seed' is required")
    run.setdefault("output_dir", "out")
    run["output_dir"] = str(Path(run["output_dir"]).resolve())
    run.setdefault("n_episodes", 1)
    run.setdefault("n_steps", 50)
    run.setdefault("save_trajectories", "first")
    run.setdefault("stream_diagnostics", False)
    run.setdefault("fewshot_iterations", 1)
    if run["save_trajectories"] not in ("all", "first", "none"):
        raise ConfigError("run.save_trajectories must be 'all', 'first' or 'none'")
    if int(run["n_episodes"]) < 1 or int(run["n_steps"]) < 0:
        raise ConfigError("run.n_episodes must be >= 1 and run.n_steps >= 0")
    if "env" not in cfg:
        if set(cfg) - {"run", "oracle"}:
            raise ConfigError("config: 'env' block is required")
        return cfg

    env = cfg["env"]
    env_id = env.get("id")
    if env_id not in ENV_CLASSES:
        raise ConfigError(f"env.id must be one of {sorted(ENV_CLASSES)}, got {env_id!r}")
    allowed = set(inspect.signature(ENV_CLASSES[env_id].__init__).parameters) - {"self", "track"}
    if env_id == "car":
        allowed.add("track_file")
    _check_keys(env, allowed | {"id"}, "env")
    if env.get("track_file") is not None:
        env["track_file"] = resolve(env["track_file"])
        if not Path(env["track_file"]).exists():
            raise ConfigError(f"env.track_file {env['track_file']} does not exist")

    prior = cfg.setdefault("prior", {})
    ptype = prior.get("type")
    if ptype not in PRIOR_KEYS:
        raise ConfigError(f"prior.type must be one of {sorted(PRIOR_KEYS)}, got {ptype!r}")
    _check_keys(prior, PRIOR_KEYS[ptype] | {"type"}, "prior")
    if ptype == "mlp":
        prior["weights"] = resolve(prior["weights"])
        if not Path(prior["weights"]).exists():
            raise ConfigError(f"prior.weights {prior['weights']} does not exist")

    dyn = cfg.setdefault("dynamics", {})
    _check_keys(dyn, DYNAMICS_KEYS, "dynamics")
    dyn.setdefault("use_true_dynamics", False)
    dyn.setdefault("heldout_horizon", 8)
    dyn.setdefault("finetune_new_only", False)
    for k in ("train", "finetune"):
        if k in dyn:
            _check_keys(dyn[k], TRAIN_KEYS - {"seed"}, f"dynamics.{k}")
    for k in ("model_file", "dataset_file"):
        if dyn.get(k) is not None:
            dyn[k] = resolve(dyn[k])

    planner = cfg.setdefault("planner", {})
    _check_keys(planner, PLANNER_KEYS, "planner")
    if "preset" in planner:
        try:
            merged = planner_preset(planner["preset"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        merged.update({k: v for k, v in planner.items() if k != "preset"})
        merged["preset"] = planner["preset"]
        cfg["planner"] = planner = merged
    planner.setdefault("variant", "residual")
    if planner["variant"] not in VARIANTS + ("prior",):
        raise ConfigError(f"planner.variant must be one of {VARIANTS + ('prior',)}")
    est = planner.get("terminal_estimator")
    if est is not None:
        _check_keys(est, {"type", "weights", "bias"}, "planner.terminal_estimator")
        if est.get("type") != "linear":
            raise ConfigError("planner.terminal_estimator.type must be 'linear'")
    return cfg


def config_hash(cfg):
    """Hash of the blocks that determine the data distribution (env, prior, data collection)."""
    dyn = cfg.get("dynamics", {})
    env = dict(cfg.get("env") or {})
    prior = dict(cfg.get("prior") or {})
    # referenced files enter by content so the hash does not depend on where they live
    if env.get("track_file"):
        env["track_file"] = _sha(env["track_file"])
    if prior.get("weights"):
        prior["weights"] = _sha(prior["weights"])
    key = {
        "env": env,
        "prior": prior,
        "collection": {k: dyn.get(k) for k in ("n_samples", "exploration_sigma")},
    }
    blob = json.dumps(key, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------------ builders

def build_env(cfg):
    kw = {k: v for k, v in cfg["env"].items() if k != "id"}
    return make_env(cfg["env"]["id"], **kw)


def build_prior(cfg, env):
    p = cfg["prior"]
    t = p["type"]
    m = env.spec.action_dim
    if t == "constant":
        return GaussianPolicy.constant(p["mean"], np.broadcast_to(p["std"], (m,)))
    if t == "linear_feedback":
        return GaussianPolicy.linear(p["gain"], p["bias"], np.broadcast_to(p["std"], (m,)))
    if t == "pure_pursuit":
        if not isinstance(env, Car):
            raise ConfigError("prior.type 'pure_pursuit' needs the car environment")
        kw = {k: p[k] for k in ("lookahead", "target_speed", "speed_gain") if k in p}
        return pure_pursuit_policy(env.track, np.broadcast_to(p["std"], (m,)), wheelbase=env.wheelbase,
                                   max_steer=env.spec.action_high[0], max_accel=env.spec.action_high[1], **kw)
    net = Mlp.load(p["weights"])
    if net.layer_dims[0] != env.spec.state_dim or net.layer_dims[-1] != m:
        raise ConfigError(f"prior network maps {net.layer_dims[0]} -> {net.layer_dims[-1]}, env needs "
                          f"{env.spec.state_dim} -> {m}")
    return GaussianPolicy.from_mlp(net, np.broadcast_to(p["log_std"], (m,)))


def build_terminal(est):
    if est is None:
        return None
    w = np.asarray(est["weights"], dtype=float)
    b = float(est.get("bias", 0.0))
    return lambda x: np.asarray(x, dtype=float) @ w + b


def build_planner_config(cfg, env, seed=0):
    p = dict(cfg["planner"])
    p.pop("preset", None)
    variant = p.pop("variant")
    p["terminal_estimator"] = build_terminal(p.get("terminal_estimator"))
    p.setdefault("omega", env.spec.omega)
    try:
        return PlannerConfig(variant="residual" if variant == "prior" else variant, seed=seed, **p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"planner: {exc}") from exc


def train_config(cfg, block, seed):
    kw = dict(cfg["dynamics"].get(block, {}))
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    return TrainConfig(seed=seed, **kw)


def make_controller(cfg, env, prior, dynamics_fn, seed=0):
    if cfg["planner"]["variant"] == "prior":
        return PriorController(prior)
    return Planner(build_planner_config(cfg, env, seed), env, prior, dynamics_fn)


def output_dir(cfg):
    out = Path(cfg["run"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ files

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.9f}"


def trajectory_columns(spec):
    cols = ["step"] + list(spec.state_labels) + list(spec.action_labels)
    return cols + ["basic_reward[-]", "addon_reward[-]", "beta[-]", "eta[-]", "ess[samples]", "degraded[flag]"]


def write_trajectory(path, traj, spec, meta=""):
    """One CSV row per executed step (state before the action); fixed 9-decimal format."""
    with open(path, "w", newline="") as f:
        f.write(f"# resmppi trajectory {meta}".rstrip() + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(trajectory_columns(spec))
        for t in range(len(traj)):
            d = traj.diagnostics[t] if t < len(traj.diagnostics) else None
            diag = [float("nan")] * 3 + [0] if d is None else [d.beta, d.eta, d.ess, int(d.degraded)]
            w.writerow([t] + [_fmt(v) for v in traj.states[t]] + [_fmt(v) for v in traj.actions[t]]
                       + [_fmt(traj.basic[t]), _fmt(traj.addon[t])] + [_fmt(v) for v in diag])


def read_trajectory(path):
    """Return ``(columns, values)`` with values as a float array ``(n_steps, n_columns)``."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    cols = rows[0]
    vals = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(cols))
    return cols, vals


def write_episode_table(path, rows):
    keys = ["episode"] + sorted({k for r in rows for k in r} - {"episode"}, key=_metric_order)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, 0)) for k in keys])


_ORDER = ["total_reward", "basic_reward", "addon_reward", "n_steps", "degraded_planner_steps"]


def _metric_order(k):
    return (_ORDER.index(k), k) if k in _ORDER else (len(_ORDER), k)


def aggregate(rows):
    """Mean and population std per metric, in episode-index order."""
    keys = sorted({k for r in rows for k in r} - {"episode", "iteration"}, key=_metric_order)
    out = {}
    for k in keys:
        v = np.array([float(r.get(k, 0)) for r in rows])
        out[k] = (float(v.mean()), float(v.std()), len(v))
    return out


def write_metrics_table(path, agg, extra=None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        head = (["iteration"] if extra is not None else []) + ["metric", "mean", "std", "n"]
        w.writerow(head)
        blocks = agg if extra is not None else [(None, agg)]
        for it, a in blocks:
            for k, (mu, sd, n) in a.items():
                w.writerow(([it] if extra is not None else []) + [k, _fmt(mu), _fmt(sd), n])


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, cfg, seed, files):
    manifest = {
        "tool": "resmppi",
        "version": __version__,
        "command": command,
        "config_hash": config_hash(cfg) if "env" in cfg else None,
        "seed": seed,
        "kernel_backend": kernels.BACKEND,
        "outputs": {Path(p).name if Path(p).parent == out else str(Path(p).relative_to(out)): _sha(p)
                    for p in sorted(map(str, files))},
    }
    with open(out / f"manifest-{command}.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


# ------------------------------------------------------------------ commands

def _seed(cfg, seed):
    return int(cfg["run"]["seed"] if seed is None else seed)


def collect_training_data(cfg, env, prior, seed):
    dyn = cfg["dynamics"]
    h = config_hash(cfg)
    sigma = dyn.get("exploration_sigma", 0.0)
    ds = collect_rollouts(env, prior, int(dyn.get("n_samples", 10000)), sigma, np.random.default_rng([seed, 0]), h)
    ds.capacity = dyn.get("capacity")
    held = collect_rollouts(env, prior, int(dyn.get("heldout_samples", 2000)), sigma,
                            np.random.default_rng([seed, 1]), h)
    return ds, held


def cmd_train_dynamics(cfg, seed=None):
    """Collect prior rollouts with exploration noise, train, evaluate on held-out data, save."""
    if cfg["dynamics"]["use_true_dynamics"]:
        raise ConfigError("dynamics.use_true_dynamics is set: there is no model to train")
    seed = _seed(cfg, seed)
    env = build_env(cfg)
    prior = build_prior(cfg, env)
    ds, held = collect_training_data(cfg, env, prior, seed)
    model = train_dynamics(ds, train_config(cfg, "train", seed))
    T = int(cfg["dynamics"]["heldout_horizon"])
    err = heldout_error(model, held, T)
    out = output_dir(cfg)
    model_path = out / "model.bin"
    data_path = out / "dataset.bin"
    model.save(model_path)
    ds.save(data_path)
    report = {
        "config_hash": config_hash(cfg),
        "n_transitions": ds.n_transitions,
        "heldout_transitions": held.n_transitions,
        "heldout_horizon": T,
        "heldout_rms_error": [float(e) for e in err],
        "final_loss": float(np.mean(model.curve[-100:])) if model.curve else None,
        "loss_curve": [float(v) for v in model.curve],
    }
    report_path = out / "training_report.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1)
        f.write("\n")
    write_manifest(out, "train-dynamics", cfg, seed, [model_path, data_path, report_path])
    return report


def load_model(cfg):
    path = cfg["dynamics"].get("model_file") or str(Path(cfg["run"]["output_dir"]) / "model.bin")
    return LearnedDynamics.load(path)


def planning_dynamics(cfg, model=None):
    # the prior pseudo-variant never plans, so it needs no model
    if cfg["dynamics"]["use_true_dynamics"] or cfg["planner"]["variant"] == "prior":
        return None
    model = load_model(cfg) if model is None else model
    return model.batch_predict


def run_episodes(cfg, env, prior, dynamics_fn, seed, iteration=0):
    """Run ``n_episodes`` receding-horizon episodes; returns ``[(trajectory, metrics)]``."""
    run = cfg["run"]
    ctl = make_controller(cfg, env, prior, dynamics_fn)
    results = []
    for ep in range(int(run["n_episodes"])):
        reset_ss, plan_ss = np.random.SeedSequence([seed, iteration, ep]).spawn(2)
        ctl.reseed(plan_ss)
        x0 = env.reset(np.random.default_rng(reset_ss))
        results.append(receding_horizon_run(ctl, env, x0, int(run["n_steps"])))
    return results


def _write_run_outputs(cfg, env, results, directory, meta=""):
    run = cfg["run"]
    directory.mkdir(parents=True, exist_ok=True)
    rows = [{"episode": i, **m.as_row()} for i, (_, m) in enumerate(results)]
    files = []
    ep_path = directory / "episodes.csv"
    write_episode_table(ep_path, rows)
    agg = aggregate(rows)
    met_path = directory / "metrics.csv"
    write_metrics_table(met_path, agg)
    files += [ep_path, met_path]
    keep = {"all": len(results), "first": 1, "none": 0}[run["save_trajectories"]]
    if keep:
        tdir = directory / "trajectories"
        tdir.mkdir(exist_ok=True)
        for i, (traj, _) in enumerate(results[:keep]):
            p = tdir / f"episode_{i:04d}.csv"
            write_trajectory(p, traj, env.spec, f"env={env.env_id} variant={cfg['planner']['variant']} episode={i} {meta}")
            files.append(p)
    if run["stream_diagnostics"]:
        p = directory / "diagnostics.jsonl"
        with open(p, "w") as f:
            for i, (traj, _) in enumerate(results):
                for t, d in enumerate(traj.diagnostics):
                    if d is None:
                        continue
                    rec = {"episode": i, "step": t, "variant": cfg["planner"]["variant"], "beta": d.beta,
                           "eta": d.eta, "ess": d.ess, "degraded": d.degraded}
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
        files.append(p)
    return rows, agg, files


def cmd_run(cfg, seed=None):
    """Zero-shot evaluation: returns ``(per-episode rows, aggregate)``."""
    seed = _seed(cfg, seed)
    env = build_env(cfg)
    prior = build_prior(cfg, env)
    dyn = planning_dynamics(cfg)
    results = run_episodes(cfg, env, prior, dyn, seed)
    out = output_dir(cfg)
    rows, agg, files = _write_run_outputs(cfg, env, results, out)
    write_manifest(out, "run", cfg, seed, files)
    return rows, agg


def cmd_fewshot(cfg, seed=None, iterations=None):
    """Alternate planner runs and online fine-tuning.

    Iteration ``i`` evaluates model ``i`` (model 0 is the trained one), appends the
    executed trajectories to the dataset and fine-tunes to get model ``i + 1``. A final
    evaluation of the last model follows, so ``iterations=0`` reproduces ``cmd_run``.
    """
    if cfg["dynamics"]["use_true_dynamics"]:
        raise ConfigError("few-shot fine-tuning needs a learned model (use_true_dynamics is set)")
    seed = _seed(cfg, seed)
    n_iter = int(cfg["run"]["fewshot_iterations"] if iterations is None else iterations)
    if n_iter < 0:
        raise ConfigError("iterations must be nonnegative")
    env = build_env(cfg)
    prior = build_prior(cfg, env)
    out = output_dir(cfg)
    model = load_model(cfg)
    data_path = cfg["dynamics"].get("dataset_file") or str(out / "dataset.bin")
    data = TransitionDataset.load(data_path)
    h = config_hash(cfg)
    if data.config_hash != h:
        raise ConfigHashMismatch(f"{data_path} was collected under config hash {data.config_hash!r}, "
                                 f"this config hashes to {h!r}")
    history = []
    files = []
    sizes = [data.n_transitions]
    for it in range(n_iter + 1):
        results = run_episodes(cfg, env, prior, model.batch_predict, seed, iteration=it)
        rows, agg, f = _write_run_outputs(cfg, env, results, out / f"iteration_{it:02d}", f"iteration={it}")
        files += f
        history.append((it, agg))
        if it == n_iter:
            break
        new = data.empty_like()
        for traj, _ in results:
            if len(traj):
                new.add_episode(traj.states, traj.actions)
        model = finetune_online(model, data, new, train_config(cfg, "finetune", seed + it + 1),
                                new_only=cfg["dynamics"]["finetune_new_only"])
        data = data.union(new)
        sizes.append(data.n_transitions)
    model_path = out / "model_fewshot.bin"
    data_path = out / "dataset_fewshot.bin"
    model.save(model_path)
    data.save(data_path)
    met_path = out / "fewshot_metrics.csv"
    write_metrics_table(met_path, history, extra=True)
    write_manifest(out, "fewshot", cfg, seed, files + [model_path, data_path, met_path])
    return history, sizes


def cmd_oracle_check(cfg):
    """Run the fixture suite; raises :class:`OracleViolation` when any fixture misbehaves."""
    path = cfg.get("oracle", {}).get("fixtures")
    if path is None:
        path = str(Path(__file__).with_name("data") / "oracle_fixtures.json")
    suite = oracle.load_fixtures(path)
    results = oracle.run_suite(suite)
    out = output_dir(cfg)
    rep = out / "oracle_report.csv"
    with open(rep, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fixture", "kind", "expect", "measured_tv", "tolerance", "ok"])
        for r in results:
            w.writerow([r.name, r.kind, r.expect, f"{r.measured:.3e}", f"{r.tolerance:.0e}", int(r.ok)])
    write_manifest(out, "oracle-check", cfg, cfg["run"]["seed"], [rep])
    bad = [r for r in results if not r.ok]
    if bad:
        raise OracleViolation(bad)
    return results
