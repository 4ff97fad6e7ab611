"""Finite deterministic MDPs and soft (maximum-entropy) Q iteration.

Actions are cells of a discretized continuous action space. Every cell carries the
quadrature weight ``action_cell_volume``, so the soft value is

    V(x) = alpha * log sum_u vol * exp(Q(x, u) / alpha)

and the Boltzmann policy has density ``exp((Q - V) / alpha)`` and per-cell probability
mass ``vol`` times that density.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .nn import BadMagicError, TruncatedPayloadError, UnsupportedVersionError

TABULAR_MAGIC = b"RTAB"
TABULAR_VERSION = 1


class SoftQConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(f"soft Q iteration did not converge in {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(eq=False)
class StateGrid:
    """Regular grid over selected state dimensions; other dimensions stay at ``base``."""

    dims: tuple
    axes: list
    base: np.ndarray
    clamp_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        self.base = np.asarray(self.base, dtype=float)
        if len(self.dims) != len(self.axes):
            raise ValueError("one axis per gridded dimension required")

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    def centers(self):
        """All cell-center states in C order, shape ``(n_cells, state_dim)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        states = np.tile(self.base, (self.n_cells, 1))
        for d, m in zip(self.dims, mesh):
            states[:, d] = m.ravel()
        return states

    def snap(self, x, clip=True):
        """Nearest-cell multi-index per gridded dim; returns ``(indices, escaped_mask)``.

        Halfway points round up. With ``clip`` the indices are clamped into range.
        """
        x = np.asarray(x, dtype=float)
        idx = []
        escaped = np.zeros(x.shape[:-1], dtype=bool)
        for d, axis in zip(self.dims, self.axes):
            n = len(axis)
            if n == 1:
                i = np.zeros(x.shape[:-1], dtype=int)
            else:
                h = (axis[-1] - axis[0]) / (n - 1)
                i = np.floor((x[..., d] - axis[0]) / h + 0.5).astype(int)
                out = (i < 0) | (i > n - 1)
                escaped |= out
                if clip:
                    i = np.clip(i, 0, n - 1)
            idx.append(i)
        return idx, escaped

    def cell_index(self, x):
        """Flat cell index of the nearest cell; out-of-grid states are clamped and counted."""
        idx, escaped = self.snap(x, clip=True)
        self.clamp_count += int(np.sum(escaped))
        return np.ravel_multi_index(idx, self.shape)


@dataclass(eq=False)
class DiscreteMDP:
    """Deterministic finite MDP; ``transition[s, a]`` is the next state index.

    ``reward`` is either stationary ``(S, A)`` or stage-indexed ``(H, S, A)``.
    """

    transition: np.ndarray
    reward: np.ndarray
    action_cell_volume: float = 1.0
    addon_reward: np.ndarray | None = None
    grid: StateGrid | None = None
    actions: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.int64)
        self.reward = np.asarray(self.reward, dtype=float)
        if self.transition.ndim != 2:
            raise ValueError("transition must be a (n_states, n_actions) table")
        if self.reward.shape[-2:] != self.transition.shape or self.reward.ndim not in (2, 3):
            raise ValueError("reward must be (n_states, n_actions) or stage-indexed (H, n_states, n_actions)")
        if self.transition.min() < 0 or self.transition.max() >= self.n_states:
            raise ValueError("transition indices out of range")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        if not self.action_cell_volume > 0:
            raise ValueError("action_cell_volume must be positive")
        if self.addon_reward is not None:
            self.addon_reward = np.asarray(self.addon_reward, dtype=float)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def with_reward(self, reward):
        return DiscreteMDP(self.transition, reward, self.action_cell_volume, self.addon_reward, self.grid, self.actions)


@dataclass(eq=False)
class TabularSolution:
    """Soft Q per stage ``q[t]``, values ``v[t]`` and ``log_z[t] = v[t] / alpha``.

    For a finite horizon H, ``q`` has H stages and ``v``/``log_z`` have H + 1 (the last
    is the terminal value). An infinite-horizon solution is stationary and stores a
    single stage; ``horizon`` is then ``None``.
    """

    q: np.ndarray
    v: np.ndarray
    log_z: np.ndarray
    alpha: float
    action_cell_volume: float
    horizon: int | None

    def _t(self, t):
        return t if self.horizon is not None else 0

    @property
    def z(self):
        return np.exp(self.log_z)

    def q_at(self, t):
        return self.q[self._t(t)]

    def v_at(self, t):
        return self.v[self._t(t)]

    def log_density(self, t=0):
        """Log Boltzmann density ``(Q - V) / alpha`` for stage ``t``, shape (S, A)."""
        return (self.q_at(t) - self.v_at(t)[:, None]) / self.alpha

    def probabilities(self, t=0):
        """Per-cell probability mass; rows sum to one."""
        return self.action_cell_volume * np.exp(self.log_density(t))


def _soft_value(q, alpha, log_vol):
    log_z = logsumexp(q / alpha + log_vol, axis=-1)
    return alpha * log_z, log_z


def soft_q_iteration(mdp, alpha, horizon=None, gamma=1.0, terminal_value=None, tol=1e-10, max_iter=100_000):
    """Solve the soft Bellman equation on ``mdp``.

    ``mdp.reward`` may carry a leading stage axis ``(H, S, A)`` for finite horizons.
    With ``horizon=None`` the stationary infinite-horizon fixed point is computed by
    iteration to a sup-norm Bellman residual of ``tol``; this needs ``gamma < 1``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    log_vol = np.log(mdp.action_cell_volume)
    reward = mdp.reward
    S = mdp.n_states
    trans = mdp.transition
    if horizon is not None:
        H = int(horizon)
        if H < 1:
            raise ValueError("horizon must be at least 1")
        stage_reward = reward if reward.ndim == 3 else np.broadcast_to(reward, (H,) + reward.shape)
        if stage_reward.shape[0] != H:
            raise ValueError(f"stage reward has {stage_reward.shape[0]} stages, horizon is {H}")
        q = np.empty((H,) + trans.shape)
        v = np.empty((H + 1, S))
        log_z = np.empty((H + 1, S))
        v[H] = 0.0 if terminal_value is None else terminal_value
        log_z[H] = v[H] / alpha
        for t in reversed(range(H)):
            q[t] = stage_reward[t] + gamma * v[t + 1][trans]
            v[t], log_z[t] = _soft_value(q[t], alpha, log_vol)
        return TabularSolution(q, v, log_z, alpha, mdp.action_cell_volume, H)

    if not 0 <= gamma < 1:
        raise ValueError("infinite-horizon soft Q iteration needs gamma < 1")
    if reward.ndim != 2:
        raise ValueError("stage-dependent rewards need a finite horizon")
    q = reward.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        v, _ = _soft_value(q, alpha, log_vol)
        q_new = reward + gamma * v[trans]
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residual <= tol:
            break
    else:
        raise SoftQConvergenceError(residual, max_iter)
    v, log_z = _soft_value(q, alpha, log_vol)
    return TabularSolution(q[None], v[None], log_z[None], alpha, mdp.action_cell_volume, None)


def bellman_residual(mdp, sol, gamma=1.0):
    """Sup-norm soft Bellman residual of every stored stage."""
    worst = 0.0
    stages = sol.q.shape[0]
    for t in range(stages):
        nxt = sol.v[t + 1] if sol.horizon is not None else sol.v[0]
        r = mdp.reward[t] if mdp.reward.ndim == 3 else mdp.reward
        worst = max(worst, float(np.max(np.abs(r + gamma * nxt[mdp.transition] - sol.q[t]))))
    return worst


def solution_to_bytes(sol):
    H = 0 if sol.horizon is None else sol.horizon
    S, A = sol.q.shape[1:]
    header = TABULAR_MAGIC + struct.pack("<IIIIdd", TABULAR_VERSION, H, S, A, sol.alpha, sol.action_cell_volume)
    return header + b"".join(a.astype("<f8").tobytes() for a in (sol.q, sol.v, sol.log_z))


def solution_from_bytes(data):
    data = memoryview(data)
    if len(data) < 36:
        raise TruncatedPayloadError("tabular header truncated")
    if bytes(data[:4]) != TABULAR_MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {TABULAR_MAGIC!r}")
    version, H, S, A, alpha, vol = struct.unpack_from("<IIIIdd", data, 4)
    if version != TABULAR_VERSION:
        raise UnsupportedVersionError(f"tabular format version {version} not supported")
    stages = H if H else 1
    vstages = H + 1 if H else 1
    shapes = [(stages, S, A), (vstages, S), (vstages, S)]
    arrays = []
    pos = 36
    for shape in shapes:
        n = 8 * int(np.prod(shape))
        if len(data) - pos < n:
            raise TruncatedPayloadError("tabular payload truncated")
        arrays.append(np.frombuffer(data[pos:pos + n], dtype="<f8").reshape(shape).astype(float))
        pos += n
    return TabularSolution(*arrays, alpha=alpha, action_cell_volume=vol, horizon=H or None)
