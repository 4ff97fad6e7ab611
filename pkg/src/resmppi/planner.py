"""Sampling-based receding-horizon planners built around a prior policy.

All variants share one loop: build a nominal action sequence, perturb it with a block
of Gaussian noise, score every perturbed sequence by rolling it through the planning
dynamics, and move the nominal by the exponentially weighted mean of the noise.

Per-step score contributions (``u = nominal + eps``, ``uc = clamp(u)``)::

    residual  gamma^t * (r_R(x, uc) + omega' * log pi(u | x))
    greedy    gamma^t * r_R(x, uc)
    full      gamma^t * (omega * r(x, uc) + r_R(x, uc))      zero nominal
    guided    same as full                                    prior nominal
    valued    guided, plus gamma^T * phi(x_T) once at the end

Every variant also adds the undiscounted coupling term ``-lambda * nominal_t^T
Sigma^-1 eps_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("residual", "greedy", "full", "guided", "valued")


class RolloutError(ValueError):
    """A nominal rollout produced a non-finite state."""

    def __init__(self, step, state):
        super().__init__(f"non-finite state at nominal rollout step {step}: {state!r}")
        self.step = step


class NoValidRolloutError(ValueError):
    pass


@dataclass
class PlannerConfig:
    variant: str = "residual"
    n_samples: int = 256
    horizon: int = 8
    sigma: object = 0.1
    temperature: float = 1.0
    gamma: float = 1.0
    omega_prime: float = 1.0
    omega: float = 1.0
    top_ratio: float = 1.0
    include_nominal: bool = True
    terminal_estimator: object = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown planner variant {self.variant!r}; expected one of {VARIANTS}")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be at least 1")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")
        self.n_samples = int(self.n_samples)
        self.horizon = int(self.horizon)
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if self.sigma.ndim != 1 or not np.all(self.sigma > 0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("sigma must be positive and finite in every dimension")
        if not self.temperature > 0:
            raise ValueError("temperature (lambda) must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.omega_prime < 0:
            raise ValueError("omega_prime must be nonnegative")
        if not 0 < self.top_ratio <= 1:
            raise ValueError("top_ratio must lie in (0, 1]")


@dataclass
class WeightVector:
    weights: np.ndarray
    eta: float
    beta: float

    @property
    def ess(self):
        """Effective sample size ``1 / sum w^2``."""
        return float(1.0 / np.sum(self.weights * self.weights))


@dataclass
class ScoredRollouts:
    scores: np.ndarray
    valid: np.ndarray
    states: np.ndarray


@dataclass
class PlanDiagnostics:
    beta: float
    eta: float
    ess: float
    degraded: bool
    n_invalid: int


def _expand_sigma(sigma, m):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.size == 1:
        return np.full(m, float(sigma.reshape(-1)[0]))
    if sigma.shape != (m,):
        raise ValueError(f"sigma has {sigma.size} entries, action dimension is {m}")
    return sigma


def init_nominal(prior, dynamics, x0, horizon):
    """Open-loop rollout of the prior mode through ``dynamics``; returns ``(T, m)``.

    The stored actions are the raw modes; ``clamp`` (when given as the ``dynamics``
    pair's second member) is applied only to what is fed to the dynamics.
    """
    step, clamp = dynamics if isinstance(dynamics, tuple) else (dynamics, None)
    x = np.asarray(x0, dtype=float)
    out = []
    for t in range(horizon):
        u = np.asarray(prior.mode(x), dtype=float)
        out.append(u)
        x = step(x, clamp(u) if clamp is not None else u)
        if not np.all(np.isfinite(x)):
            raise RolloutError(t, x)
    return np.array(out)


def sample_noise(config, rng, action_dim):
    """Draw the whole ``(K, T, m)`` noise block in one pass."""
    sigma = _expand_sigma(config.sigma, action_dim)
    return sigma * rng.standard_normal((config.n_samples, config.horizon, action_dim))


def score_rollouts(config, env, prior, dynamics, x0, nominal, noise):
    """Score every noise sequence in ``noise`` (shape ``(N, T, m)``) from state ``x0``.

    ``dynamics`` maps a batch of states and (clamped) actions to next states. Rollouts
    that hit a non-finite value are marked invalid instead of raising.
    """
    nominal = np.asarray(nominal, dtype=float)
    N, T, m = noise.shape
    if nominal.shape != (T, m):
        raise ValueError(f"nominal shape {nominal.shape} does not match noise block {noise.shape[1:]}")
    sigma = _expand_sigma(config.sigma, m)
    inv_var = 1.0 / (sigma * sigma)
    lam = config.temperature
    variant = config.variant
    x = np.broadcast_to(np.asarray(x0, dtype=float), (N, len(x0))).copy()
    states = np.empty((N, T + 1, x.shape[1]))
    states[:, 0] = x
    scores = np.zeros(N)
    with np.errstate(all="ignore"):
        for t in range(T):
            eps = noise[:, t]
            u = nominal[t] + eps
            uc = env.clamp(u)
            step = env.batch_addon_reward(x, uc)
            if variant == "residual":
                step = step + config.omega_prime * prior.log_prob(x, u)
            elif variant in ("full", "guided", "valued"):
                step = config.omega * env.batch_basic_reward(x, uc) + step
            scores += config.gamma ** t * step
            scores -= lam * (eps @ (nominal[t] * inv_var))
            x = dynamics(x, uc)
            states[:, t + 1] = x
        if variant == "valued" and config.terminal_estimator is not None:
            scores += config.gamma ** T * np.asarray(config.terminal_estimator(x), dtype=float)
    valid = np.isfinite(scores) & np.all(np.isfinite(states), axis=(1, 2))
    return ScoredRollouts(scores, valid, states)


def compute_weights(scores, temperature, top_ratio=1.0, valid=None):
    """Softmax weights over the top ``ceil(top_ratio * n_valid)`` finite scores.

    The shift ``beta`` is the largest retained score, so every exponent is <= 0.
    Ties at the elite cut are broken by candidate index.
    """
    scores = np.asarray(scores, dtype=float)
    ok = np.isfinite(scores) if valid is None else (np.asarray(valid, dtype=bool) & np.isfinite(scores))
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise NoValidRolloutError("every candidate score is invalid")
    # the small slack keeps e.g. 0.07 * 100 (7.000000000000001) from rounding up to 8
    n_keep = min(n_ok, max(1, math.ceil(top_ratio * n_ok - 1e-9)))
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(-scores[idx], kind="stable")][:n_keep]
    beta = float(scores[order[0]])
    w = np.zeros_like(scores)
    w[order] = np.exp((scores[order] - beta) / temperature)
    eta = float(w.sum())
    return WeightVector(w / eta, eta, beta)


def update_sequence(nominal, noise, weights):
    """``nominal_t + sum_k w_k eps_t^k``."""
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    return np.asarray(nominal, dtype=float) + np.tensordot(w, noise, axes=(0, 0))


class Planner:
    """Stateful wrapper holding the config, the models and the noise stream.

    ``dynamics`` is the planning model (a callable on state and action batches); when
    omitted the true environment step is used.
    """

    def __init__(self, config: PlannerConfig, env, prior, dynamics=None):
        self.config = config
        self.env = env
        self.prior = prior
        self.dynamics = dynamics if dynamics is not None else env.batch_step
        self.rng = np.random.default_rng(config.seed)
        self.last = None
        self.degraded_steps = 0
        m = env.spec.action_dim
        self.sigma = _expand_sigma(config.sigma, m)
        if prior is not None and getattr(prior, "action_dim", m) != m:
            raise ValueError("prior and environment action dimensions differ")

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def nominal(self, x0):
        T = self.config.horizon
        if self.config.variant == "full":
            return np.zeros((T, self.env.spec.action_dim))
        return init_nominal(self.prior, (self.dynamics, self.env.clamp), x0, T)

    def plan(self, x0):
        """One planning call; returns the updated ``(T, m)`` sequence."""
        cfg = self.config
        x0 = np.asarray(x0, dtype=float)
        nominal = self.nominal(x0)
        noise = sample_noise(cfg, self.rng, self.env.spec.action_dim)
        if cfg.include_nominal:
            noise = np.concatenate([noise, np.zeros((1,) + noise.shape[1:])])
        scored = score_rollouts(cfg, self.env, self.prior, self.dynamics, x0, nominal, noise)
        n_invalid = int((~scored.valid).sum())
        try:
            wv = compute_weights(scored.scores, cfg.temperature, cfg.top_ratio, scored.valid)
        except NoValidRolloutError:
            self.degraded_steps += 1
            self.last = PlanDiagnostics(float("nan"), float("nan"), 0.0, True, n_invalid)
            return nominal
        self.last = PlanDiagnostics(wv.beta, wv.eta, wv.ess, False, n_invalid)
        return update_sequence(nominal, noise, wv)

    def act(self, x):
        return self.plan(x)[0]


class PriorController:
    """Planner stand-in that executes the prior mode (the ``prior`` pseudo-variant)."""

    def __init__(self, prior):
        self.prior = prior
        self.last = None
        self.degraded_steps = 0

    def reseed(self, seed):
        pass

    def act(self, x):
        return np.asarray(self.prior.mode(np.asarray(x, dtype=float)), dtype=float)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    basic: np.ndarray
    addon: np.ndarray
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


@dataclass
class EpisodeMetrics:
    total_reward: float = 0.0
    basic_reward: float = 0.0
    addon_reward: float = 0.0
    n_steps: int = 0
    degraded_planner_steps: int = 0
    counters: dict = field(default_factory=dict)

    def as_row(self):
        row = {
            "total_reward": self.total_reward,
            "basic_reward": self.basic_reward,
            "addon_reward": self.addon_reward,
            "n_steps": self.n_steps,
            "degraded_planner_steps": self.degraded_planner_steps,
        }
        row.update(self.counters)
        return row


def receding_horizon_run(controller, env, x0, n_steps):
    """Re-plan from the true state every step and execute the first action in ``env``.

    Returns ``(Trajectory, EpisodeMetrics)``. Counters reported by ``env.counters``
    are counted at every executed (post-step) state. For environments with a
    ``progress`` method and a closed track, ``lap_time_steps`` is the first step at
    which the accumulated progress reaches the track length (-1 if never).
    """
    x = np.asarray(x0, dtype=float)
    spec = env.spec
    states = [x]
    actions, basic, addon, diags = [], [], [], []
    metrics = EpisodeMetrics()
    counts = {}
    track = getattr(env, "track", None)
    lap = -1 if track is not None else None
    travelled = 0.0
    for t in range(n_steps):
        u = env.clamp(controller.act(x))
        try:
            b = float(env.basic_reward(x, u))
            a = float(env.addon_reward(x, u))
            x_next = env.step(x, u)
        except ValueError as exc:
            raise ValueError(f"environment error at step {t}: {exc}") from exc
        if track is not None:
            travelled += float(env.progress(x, x_next))
            if lap == -1 and travelled >= track.total_length:
                lap = t + 1
        for k, v in env.counters(x_next).items():
            counts[k] = counts.get(k, 0) + int(v)
        metrics.basic_reward += b
        metrics.addon_reward += a
        metrics.total_reward += spec.omega * b + a
        actions.append(u)
        basic.append(b)
        addon.append(a)
        diags.append(controller.last)
        x = x_next
        states.append(x)
    metrics.n_steps = n_steps
    metrics.degraded_planner_steps = sum(1 for d in diags if d is not None and d.degraded)
    metrics.counters = {f"{k}_steps": v for k, v in counts.items()}
    if lap is not None:
        metrics.counters["lap_time_steps"] = lap
    m = spec.action_dim
    traj = Trajectory(
        np.array(states),
        np.array(actions).reshape(-1, m),
        np.array(basic),
        np.array(addon),
        diags,
    )
    return traj, metrics
