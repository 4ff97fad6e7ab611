"""Learned dynamics trained with a discounted multi-step open-loop loss.

The model predicts a residual in an encoded state space where every angle is
replaced by its (sin, cos) pair::

    e' = e + out_scale * net((concat(e, u) - in_mean) / in_std)

so a network with zero output is the identity map. Normalization statistics are
fitted once, on the first training set, and frozen afterwards.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from .envs import decode_state, encode_state, encoded_dim, wrap_angle
from .nn import (
    AdamState,
    BadMagicError,
    Mlp,
    TruncatedPayloadError,
    UnsupportedVersionError,
    WeightFormatError,
    adam_step,
)

DATASET_MAGIC = b"RDST"
DATASET_VERSION = 1
NORM_MAGIC = b"RNRM"
ADAM_MAGIC = b"RADM"
MODEL_VERSION = 1


class InsufficientDataError(ValueError):
    pass


class ConfigHashMismatch(ValueError):
    pass


@dataclass
class Window:
    states: np.ndarray
    actions: np.ndarray
    episode_ids: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("a window of T actions needs T + 1 states")
        if len(self.actions) < 1:
            raise ValueError("window length must be at least 1")
        if np.any(self.episode_ids != self.episode_ids[0]):
            raise ValueError("window crosses an episode boundary")


class TransitionDataset:
    """Episodes of ``(states[0..n], actions[0..n-1])``; transitions never span episodes.

    ``capacity`` bounds the number of stored transitions; the oldest whole episodes are
    evicted first.
    """

    def __init__(self, state_dim, action_dim, angle_dims=(), capacity=None, config_hash=""):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.angle_dims = tuple(angle_dims)
        self.capacity = capacity
        self.config_hash = config_hash
        self.episodes: list[tuple[np.ndarray, np.ndarray]] = []

    def __len__(self):
        return self.n_transitions

    @property
    def n_transitions(self):
        return sum(len(a) for _, a in self.episodes)

    def empty_like(self):
        return TransitionDataset(self.state_dim, self.action_dim, self.angle_dims, self.capacity, self.config_hash)

    def add_episode(self, states, actions):
        states = np.array(states, dtype=float)
        actions = np.array(actions, dtype=float).reshape(-1, self.action_dim)
        if states.shape != (len(actions) + 1, self.state_dim):
            raise ValueError(f"episode needs {len(actions) + 1} states of dim {self.state_dim}, got {states.shape}")
        if len(actions) == 0:
            return
        self.episodes.append((states, actions))
        if self.capacity is not None:
            while self.n_transitions > self.capacity and len(self.episodes) > 1:
                self.episodes.pop(0)

    def transitions(self):
        """Flat ``(x, u, x_next)`` arrays."""
        if not self.episodes:
            z = np.zeros((0, self.state_dim))
            return z, np.zeros((0, self.action_dim)), z
        xs = np.concatenate([s[:-1] for s, _ in self.episodes])
        us = np.concatenate([a for _, a in self.episodes])
        xn = np.concatenate([s[1:] for s, _ in self.episodes])
        return xs, us, xn

    def window_index(self, T):
        """All ``(episode, start)`` pairs whose T-step window stays inside one episode."""
        pairs = [(e, t) for e, (_, a) in enumerate(self.episodes) for t in range(len(a) - T + 1)]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def window(self, episode, start, T):
        states, actions = self.episodes[episode]
        if start < 0 or start + T > len(actions):
            raise ValueError(f"window [{start}, {start + T}) leaves episode {episode} of length {len(actions)}")
        return Window(states[start:start + T + 1], actions[start:start + T], np.full(T + 1, episode))

    def gather(self, pairs, T):
        """Stack windows into ``(B, T+1, n)`` states and ``(B, T, m)`` actions."""
        S = np.empty((len(pairs), T + 1, self.state_dim))
        U = np.empty((len(pairs), T, self.action_dim))
        for i, (e, t) in enumerate(pairs):
            states, actions = self.episodes[e]
            S[i] = states[t:t + T + 1]
            U[i] = actions[t:t + T]
        return S, U

    def union(self, other):
        if (other.state_dim, other.action_dim, other.angle_dims) != (self.state_dim, self.action_dim, self.angle_dims):
            raise ValueError("datasets have incompatible layouts")
        if other.config_hash and self.config_hash and other.config_hash != self.config_hash:
            raise ConfigHashMismatch(f"dataset config hash {other.config_hash} != {self.config_hash}")
        out = self.empty_like()
        out.capacity = None
        out.episodes = list(self.episodes) + list(other.episodes)
        out.capacity = self.capacity
        if out.capacity is not None:
            while out.n_transitions > out.capacity and len(out.episodes) > 1:
                out.episodes.pop(0)
        return out

    def to_bytes(self):
        """Versioned binary layout: header, episode length table, float64 payload."""
        h = self.config_hash.encode()
        head = DATASET_MAGIC + struct.pack(
            f"<IIII{len(self.angle_dims)}IQI",
            DATASET_VERSION, self.state_dim, self.action_dim, len(self.angle_dims), *self.angle_dims,
            0 if self.capacity is None else self.capacity, len(h),
        ) + h
        table = struct.pack(f"<Q{len(self.episodes)}Q", len(self.episodes), *[len(a) for _, a in self.episodes])
        payload = b"".join(s.astype("<f8").tobytes() + a.astype("<f8").tobytes() for s, a in self.episodes)
        return head + table + payload

    @classmethod
    def from_bytes(cls, data):
        data = memoryview(data)
        if len(data) < 20:
            raise TruncatedPayloadError("dataset header truncated")
        if bytes(data[:4]) != DATASET_MAGIC:
            raise BadMagicError(f"bad dataset magic {bytes(data[:4])!r}")
        version, sd, ad, na = struct.unpack_from("<IIII", data, 4)
        if version != DATASET_VERSION:
            raise UnsupportedVersionError(f"dataset version {version} not supported")
        pos = 20
        try:
            angle = struct.unpack_from(f"<{na}I", data, pos)
            pos += 4 * na
            cap, hlen = struct.unpack_from("<QI", data, pos)
            pos += 12
            h = bytes(data[pos:pos + hlen]).decode()
            pos += hlen
            (n_ep,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            lengths = struct.unpack_from(f"<{n_ep}Q", data, pos)
            pos += 8 * n_ep
        except struct.error as exc:
            raise TruncatedPayloadError(f"dataset header truncated: {exc}") from None
        ds = cls(sd, ad, angle, cap or None, h)
        for n in lengths:
            ns, na_ = 8 * (n + 1) * sd, 8 * n * ad
            if len(data) - pos < ns + na_:
                raise TruncatedPayloadError("dataset payload truncated")
            s = np.frombuffer(data[pos:pos + ns], dtype="<f8").reshape(n + 1, sd).astype(float)
            pos += ns
            a = np.frombuffer(data[pos:pos + na_], dtype="<f8").reshape(n, ad).astype(float)
            pos += na_
            ds.episodes.append((s, a))
        return ds

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


@dataclass
class TrainConfig:
    window: int = 8
    gamma: float = 0.9
    learning_rate: float = 1e-3
    final_learning_rate: float | None = None
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    hidden: tuple = (64, 64)
    activation: str = "mish"

    def lr_at(self, k):
        """Constant rate, or geometric decay to ``final_learning_rate`` over ``steps``."""
        if self.final_learning_rate is None or self.steps <= 1:
            return self.learning_rate
        frac = min(k / (self.steps - 1), 1.0)
        return self.learning_rate * (self.final_learning_rate / self.learning_rate) ** frac


@dataclass(eq=False)
class LearnedDynamics:
    net: Mlp
    state_dim: int
    action_dim: int
    angle_dims: tuple
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: np.ndarray
    adam: AdamState | None = None
    curve: list = field(default_factory=list)

    @property
    def enc_dim(self):
        return encoded_dim(self.state_dim, self.angle_dims)

    @classmethod
    def untrained(cls, state_dim, action_dim, angle_dims=(), hidden=(64, 64), activation="mish", rng=None, zero=False):
        e = encoded_dim(state_dim, angle_dims)
        dims = [e + action_dim, *hidden, e]
        net = Mlp(dims, activation) if zero else Mlp.initialize(dims, activation, rng)
        return cls(net, state_dim, action_dim, tuple(angle_dims),
                   np.zeros(e + action_dim), np.ones(e + action_dim), np.ones(e))

    def copy(self):
        return copy.deepcopy(self)

    def step_encoded(self, e, u):
        z = (np.concatenate([e, u], axis=-1) - self.in_mean) / self.in_std
        return e + self.out_scale * self.net.forward(z)

    def predict(self, x, u):
        """Next state; raises on non-finite input or output."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.state_dim,) or u.shape[-1:] != (self.action_dim,):
            raise ValueError(f"predict expects states of dim {self.state_dim} and actions of dim {self.action_dim}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("non-finite input to learned dynamics")
        out = self.batch_predict(x, u)
        if not np.all(np.isfinite(out)):
            raise ValueError("learned dynamics produced a non-finite state")
        return out

    def batch_predict(self, x, u):
        e = encode_state(x, self.angle_dims)
        return decode_state(self.step_encoded(e, u), self.angle_dims, self.state_dim)

    __call__ = batch_predict

    def fit_normalization(self, dataset):
        xs, us, xn = dataset.transitions()
        e = encode_state(xs, self.angle_dims)
        inp = np.concatenate([e, us], axis=1)
        self.in_mean = inp.mean(axis=0)
        self.in_std = np.maximum(inp.std(axis=0), 1e-8)
        delta = encode_state(xn, self.angle_dims) - e
        self.out_scale = np.maximum(np.sqrt(np.mean(delta * delta, axis=0)), 1e-8)

    def to_bytes(self):
        out = self.net.to_bytes()
        out += NORM_MAGIC + struct.pack(
            f"<IIII{len(self.angle_dims)}I", MODEL_VERSION, self.state_dim, self.action_dim,
            len(self.angle_dims), *self.angle_dims,
        )
        out += b"".join(a.astype("<f8").tobytes() for a in (self.in_mean, self.in_std, self.out_scale))
        if self.adam is not None:
            a = self.adam
            out += ADAM_MAGIC + struct.pack("<Qdddd", a.step, a.learning_rate, a.beta1, a.beta2, a.epsilon)
            out += b"".join(x.astype("<f8").tobytes() for x in a.m + a.v)
        return out

    @classmethod
    def from_bytes(cls, data):
        data = memoryview(data)
        net, pos = Mlp.from_bytes(data)
        if bytes(data[pos:pos + 4]) != NORM_MAGIC:
            raise BadMagicError("missing normalization block after network weights")
        try:
            version, sd, ad, na = struct.unpack_from("<IIII", data, pos + 4)
            if version != MODEL_VERSION:
                raise UnsupportedVersionError(f"model version {version} not supported")
            pos += 20
            angle = struct.unpack_from(f"<{na}I", data, pos)
        except struct.error as exc:
            raise TruncatedPayloadError(f"normalization block truncated: {exc}") from None
        pos += 4 * na
        e = encoded_dim(sd, angle)
        arrays = []
        for n in (e + ad, e + ad, e):
            if len(data) - pos < 8 * n:
                raise TruncatedPayloadError("normalization payload truncated")
            arrays.append(np.frombuffer(data[pos:pos + 8 * n], dtype="<f8").astype(float))
            pos += 8 * n
        model = cls(net, sd, ad, tuple(angle), *arrays)
        if pos < len(data):
            if bytes(data[pos:pos + 4]) != ADAM_MAGIC:
                raise WeightFormatError("unexpected trailing block in model file")
            try:
                step, lr, b1, b2, eps = struct.unpack_from("<Qdddd", data, pos + 4)
            except struct.error as exc:
                raise TruncatedPayloadError(f"optimizer block truncated: {exc}") from None
            pos += 44
            ms = []
            for p in net.params + net.params:
                n = 8 * p.size
                if len(data) - pos < n:
                    raise TruncatedPayloadError("optimizer payload truncated")
                ms.append(np.frombuffer(data[pos:pos + n], dtype="<f8").reshape(p.shape).astype(float))
                pos += n
            k = len(net.params)
            model.adam = AdamState(lr, b1, b2, eps, step, ms[:k], ms[k:])
        return model

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def collect_rollouts(env, policy, n_steps, exploration_sigma, rng, config_hash=""):
    """Roll out ``mode + N(0, sigma^2)`` (clamped) from ``env.reset``; episodes are capped
    at ``env.spec.horizon_limit`` steps. The dataset stores the executed, clamped action."""
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    spec = env.spec
    sigma = np.broadcast_to(np.asarray(exploration_sigma, dtype=float), (spec.action_dim,))
    ds = TransitionDataset(spec.state_dim, spec.action_dim, spec.angle_dims, config_hash=config_hash)
    remaining = n_steps
    while remaining > 0:
        n = min(spec.horizon_limit, remaining)
        x = env.reset(rng)
        states = [x]
        actions = []
        for _ in range(n):
            u = env.clamp(policy.mode(x) + sigma * rng.standard_normal(spec.action_dim))
            x = env.step(x, u)
            states.append(x)
            actions.append(u)
        ds.add_episode(np.array(states), np.array(actions))
        remaining -= n
    return ds


def _rollout_encoded(model, S0, U):
    """Recursive prediction from encoded start states ``S0`` under actions ``U``."""
    preds = [S0]
    e = S0
    for t in range(U.shape[1]):
        e = model.step_encoded(e, U[:, t])
        preds.append(e)
    return np.stack(preds, axis=1)


def multi_step_loss(model, window, gamma):
    """``sum_t gamma^t ||s_t - s_hat_t||^2`` over one window, in the encoded state space.

    ``s_hat_0 = s_0`` and ``s_hat_{t+1} = F(s_hat_t, u_t)``. ``model`` only needs a
    ``step_encoded(e, u)`` method and an ``angle_dims`` attribute.
    """
    if not isinstance(window, Window):
        raise TypeError("multi_step_loss expects a Window (use TransitionDataset.window)")
    S = encode_state(window.states, model.angle_dims)[None]
    pred = _rollout_encoded(model, S[:, 0], window.actions[None])
    d = S - pred
    disc = gamma ** np.arange(S.shape[1])
    return float(np.sum(disc * np.sum(d * d, axis=-1)))


def loss_and_grads(model, S, U, gamma):
    """Batch-mean multi-step loss and its exact gradient w.r.t. the network parameters.

    ``S`` holds encoded states ``(B, T+1, e)`` and ``U`` actions ``(B, T, m)``.
    Gradients are back-propagated through the whole recursion.
    """
    net = model.net
    B, T1, E = S.shape
    T = T1 - 1
    e = S[:, 0]
    caches, diffs = [], []
    loss = 0.0
    for t in range(T):
        z = (np.concatenate([e, U[:, t]], axis=1) - model.in_mean) / model.in_std
        y, cache = net.forward_cache(z)
        caches.append(cache)
        e = e + model.out_scale * y
        d = S[:, t + 1] - e
        diffs.append(d)
        loss += gamma ** (t + 1) * float(np.sum(d * d))
    grads = [np.zeros_like(p) for p in net.params]
    g_e = np.zeros((B, E))
    for t in reversed(range(T)):
        g_e = g_e - (2.0 * gamma ** (t + 1) / B) * diffs[t]
        pg, g_z = net.backward(caches[t], g_e * model.out_scale)
        for acc, g in zip(grads, pg):
            acc += g
        g_e = g_e + g_z[:, :E] / model.in_std[:E]
    return loss / B, grads


def _run_adam(model, dataset, config, rng, lr_offset=0):
    T = config.window
    pairs = dataset.window_index(T)
    if len(pairs) < config.batch_size:
        raise InsufficientDataError(
            f"need at least {config.batch_size} windows of length {T}, dataset has {len(pairs)}"
        )
    if model.adam is None:
        model.adam = AdamState.for_params(model.net.params, config.learning_rate)
    params = model.net.params
    for k in range(config.steps):
        idx = rng.integers(0, len(pairs), size=config.batch_size)
        S, U = dataset.gather(pairs[idx], T)
        S = encode_state(S, model.angle_dims)
        loss, grads = loss_and_grads(model, S, U, config.gamma)
        model.adam.learning_rate = config.lr_at(k + lr_offset)
        adam_step(model.adam, params, grads)
        model.curve.append(loss)
    return model


def train_dynamics(dataset, config: TrainConfig):
    """Fit normalization, initialize a network from ``config.seed`` and train it."""
    rng = np.random.default_rng(config.seed)
    model = LearnedDynamics.untrained(
        dataset.state_dim, dataset.action_dim, dataset.angle_dims, config.hidden, config.activation, rng
    )
    if dataset.n_transitions == 0:
        raise InsufficientDataError(f"need at least {config.batch_size} windows of length {config.window}, dataset is empty")
    model.fit_normalization(dataset)
    if config.steps == 0:
        return model
    return _run_adam(model, dataset, config, rng)


def finetune_online(model, old_data, new_data, config: TrainConfig, new_only=False):
    """Continue Adam (normalization frozen) on ``old ∪ new`` or on the new data only.

    Returns a new model; the input model is left untouched.
    """
    out = model.copy()
    data = new_data if new_only else old_data.union(new_data)
    step0 = 0 if out.adam is None else out.adam.step
    rng = np.random.default_rng([config.seed, step0])
    return _run_adam(out, data, config, rng)


def open_loop_errors(model, dataset, T):
    """Absolute open-loop errors per window after 1..T steps, shape ``(W, T, n)``.

    Angle errors are wrapped into [-pi, pi).
    """
    pairs = dataset.window_index(T)
    S, U = dataset.gather(pairs, T)
    x = S[:, 0]
    errs = []
    for t in range(T):
        x = model.batch_predict(x, U[:, t])
        d = x - S[:, t + 1]
        for a in model.angle_dims:
            d[:, a] = wrap_angle(d[:, a])
        errs.append(np.abs(d))
    return np.stack(errs, axis=1)


def heldout_error(model, dataset, T=8):
    """Per-dimension RMS error of the T-step open-loop prediction over all windows."""
    err = open_loop_errors(model, dataset, T)[:, -1]
    return np.sqrt(np.mean(err * err, axis=0))
