"""Maximum-entropy prior policies: mode, sampling and exact log-density."""

from __future__ import annotations

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .nn import Mlp
from .tabular import soft_q_iteration  # noqa: F401  (re-exported for callers of this module)

LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianPolicy:
    """Diagonal Gaussian policy around a state-dependent mean.

    ``mean_fn`` must map a batch of states ``(..., n)`` to actions ``(..., m)``.
    """

    def __init__(self, mean_fn, std, backing="linear_feedback"):
        std = np.atleast_1d(np.asarray(std, dtype=float))
        if std.ndim != 1 or not np.all(std > 0) or not np.all(np.isfinite(std)):
            raise ValueError(f"policy std must be a positive finite vector, got {std!r}")
        self.mean_fn = mean_fn
        self.std = std
        self.var = std * std
        self.backing = backing
        self._log_norm = -0.5 * float(np.sum(np.log(self.var) + LOG_2PI))

    @property
    def action_dim(self):
        return len(self.std)

    @classmethod
    def linear(cls, gain, bias, std):
        """Linear feedback ``u = gain @ x + bias``."""
        gain = np.atleast_2d(np.asarray(gain, dtype=float))
        bias = np.asarray(bias, dtype=float)
        return cls(lambda x: np.asarray(x, dtype=float) @ gain.T + bias, std, "linear_feedback")

    @classmethod
    def constant(cls, mean, std):
        mean = np.asarray(mean, dtype=float)
        return cls(lambda x: np.broadcast_to(mean, np.shape(x)[:-1] + mean.shape).copy(), std, "linear_feedback")

    @classmethod
    def from_mlp(cls, net: Mlp, log_std):
        """Gaussian head on a loaded network: the network output is the mean."""
        return cls(net.forward, np.exp(np.asarray(log_std, dtype=float)), "mlp_loaded")

    def mode(self, x):
        return np.asarray(self.mean_fn(np.asarray(x, dtype=float)), dtype=float)

    def log_prob(self, x, u):
        z = (np.asarray(u, dtype=float) - self.mode(x)) / self.std
        return self._log_norm - 0.5 * np.sum(z * z, axis=-1)

    def log_prob_at(self, mean, u):
        """Log-density given a precomputed mean (saves a second ``mean_fn`` call)."""
        z = (u - mean) / self.std
        return self._log_norm - 0.5 * np.sum(z * z, axis=-1)

    def sample(self, x, rng):
        mu = self.mode(x)
        return mu + self.std * rng.standard_normal(mu.shape)


class TabularSoftPolicy:
    """Boltzmann policy of a tabular soft Q solution over a state grid.

    ``actions`` holds the action-cell centers ``(A, m)``; the policy at a continuous
    state is the one of the nearest grid cell (states outside the grid are clamped and
    counted in ``grid.clamp_count``).
    """

    def __init__(self, grid, solution, actions, stage=0):
        self.grid = grid
        self.solution = solution
        self.actions = np.atleast_2d(np.asarray(actions, dtype=float))
        self.stage = stage
        self.alpha = solution.alpha
        self.q_table = solution.q_at(stage)
        if self.q_table.shape != (grid.n_cells, len(self.actions)):
            raise ValueError("Q table does not match grid cells x actions")

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def probabilities(self, cell=None):
        p = self.solution.probabilities(self.stage)
        return p if cell is None else p[cell]

    def mode_index(self, x):
        return np.argmax(self.q_table[self.grid.cell_index(x)], axis=-1)

    def mode(self, x):
        return self.actions[self.mode_index(x)]

    def log_prob(self, x, u):
        """Log Boltzmann density of the action cell nearest to ``u``."""
        cell = self.grid.cell_index(x)
        u = np.asarray(u, dtype=float)
        d2 = np.sum((u[..., None, :] - self.actions) ** 2, axis=-1)
        a = np.argmin(d2, axis=-1)
        return self.solution.log_density(self.stage)[cell, a]

    def boltzmann_mean(self):
        """Expected action per cell, shape ``(n_cells, m)``."""
        return self.probabilities() @ self.actions


def tabular_to_continuous(tab: TabularSoftPolicy, smoothing_sigma):
    """Gaussian policy whose mean multilinearly interpolates the per-cell Boltzmann mean."""
    grid = tab.grid
    means = tab.boltzmann_mean().reshape(grid.shape + (tab.action_dim,))
    live = [i for i, n in enumerate(grid.shape) if n > 1]
    values = means.reshape([grid.shape[i] for i in live] + [tab.action_dim]) if live else means.reshape(1, -1)
    dims = [grid.dims[i] for i in live]
    lo = np.array([grid.axes[i][0] for i in live])
    hi = np.array([grid.axes[i][-1] for i in live])

    if not live:
        const = values[0]

        def mean_fn(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(const, x.shape[:-1] + const.shape).copy()
    else:
        interp = RegularGridInterpolator([grid.axes[i] for i in live], values, method="linear")

        def mean_fn(x):
            x = np.asarray(x, dtype=float)
            pts = x[..., dims]
            clipped = np.clip(pts, lo, hi)
            grid.clamp_count += int(np.sum(np.any(clipped != pts, axis=-1)))
            return interp(clipped.reshape(-1, len(dims))).reshape(x.shape[:-1] + (tab.action_dim,))

    sigma = np.broadcast_to(np.asarray(smoothing_sigma, dtype=float), (tab.action_dim,))
    return GaussianPolicy(mean_fn, sigma, "tabular_interpolated")


class PurePursuit:
    """Pure-pursuit steering plus proportional speed control on a car track.

    A long ``lookahead`` makes the controller cut the inside of corners, which is the
    behavior the off-course customization task corrects.
    """

    def __init__(self, track, lookahead=20.0, target_speed=12.0, speed_gain=1.0,
                 wheelbase=2.5, max_steer=0.4, max_accel=3.0):
        self.track = track
        self.lookahead = lookahead
        self.target_speed = target_speed
        self.speed_gain = speed_gain
        self.wheelbase = wheelbase
        self.max_steer = max_steer
        self.max_accel = max_accel

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        _, _, s = self.track.project(x[..., :2])
        target = self.track.point_at(s + self.lookahead)
        dx = target[..., 0] - x[..., 0]
        dy = target[..., 1] - x[..., 1]
        ld = np.maximum(np.hypot(dx, dy), 1e-6)
        alpha = np.arctan2(dy, dx) - x[..., 2]
        steer = np.arctan2(2.0 * self.wheelbase * np.sin(alpha), ld)
        accel = self.speed_gain * (self.target_speed - x[..., 3])
        u = np.stack([np.clip(steer, -self.max_steer, self.max_steer),
                      np.clip(accel, -self.max_accel, self.max_accel)], axis=-1)
        return u


def pure_pursuit_policy(track, std, **kwargs):
    return GaussianPolicy(PurePursuit(track, **kwargs), std, "feedback")
