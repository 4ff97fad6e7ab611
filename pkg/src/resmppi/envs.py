"""Desk-scale continuous-control environments.

Each environment supplies deterministic explicit-Euler dynamics, a basic reward for
the prior task and an add-on reward for the customization task. All methods accept
single states ``(n,)`` or batches ``(..., n)``.

The ``step``/``basic_reward``/``addon_reward`` methods validate their inputs; the
``batch_*`` variants skip validation and are what the planner calls in its inner loop,
where a non-finite rollout must be flagged rather than raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


@dataclass(eq=False)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    dt: float
    omega: float = 1.0
    horizon_limit: int = 100
    angle_dims: tuple[int, ...] = ()
    state_labels: tuple[str, ...] = ()
    action_labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=float)
        self.action_high = np.asarray(self.action_high, dtype=float)
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state_dim and action_dim must be positive")
        if self.action_low.shape != (self.action_dim,) or self.action_high.shape != (self.action_dim,):
            raise ValueError("action bounds must have shape (action_dim,)")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be strictly below action_high")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        if self.horizon_limit < 1:
            raise ValueError("horizon_limit must be positive")


def encode_state(x, angle_dims):
    """Replace every angle dimension by its (sin, cos) pair."""
    x = np.asarray(x, dtype=float)
    if not angle_dims:
        return x
    cols = []
    for i in range(x.shape[-1]):
        if i in angle_dims:
            cols += [np.sin(x[..., i]), np.cos(x[..., i])]
        else:
            cols.append(x[..., i])
    return np.stack(cols, axis=-1)


def decode_state(e, angle_dims, state_dim):
    """Inverse of :func:`encode_state`; angles come back in (-pi, pi]."""
    e = np.asarray(e, dtype=float)
    if not angle_dims:
        return e
    cols = []
    j = 0
    for i in range(state_dim):
        if i in angle_dims:
            cols.append(np.arctan2(e[..., j], e[..., j + 1]))
            j += 2
        else:
            cols.append(e[..., j])
            j += 1
    return np.stack(cols, axis=-1)


def encoded_dim(state_dim, angle_dims):
    return state_dim + len(angle_dims)


class Env:
    """Base class; subclasses implement the ``batch_*`` methods."""

    spec: EnvSpec
    env_id: str

    def clamp(self, u):
        return np.clip(u, self.spec.action_low, self.spec.action_high)

    def _check(self, x, u=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.spec.state_dim,):
            raise ValueError(
                f"{self.env_id}: state has trailing dimension {x.shape[-1:]} , expected {self.spec.state_dim}"
            )
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{self.env_id}: non-finite state {x!r}")
        if u is None:
            return x, None
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (self.spec.action_dim,):
            raise ValueError(
                f"{self.env_id}: action has trailing dimension {u.shape[-1:]}, expected {self.spec.action_dim}"
            )
        if not np.all(np.isfinite(u)):
            raise ValueError(f"{self.env_id}: non-finite action {u!r}")
        return x, u

    def step(self, x, u):
        x, u = self._check(x, u)
        return self.batch_step(x, self.clamp(u))

    def basic_reward(self, x, u):
        x, u = self._check(x, u)
        return self.batch_basic_reward(x, self.clamp(u))

    def addon_reward(self, x, u):
        x, u = self._check(x, u)
        return self.batch_addon_reward(x, self.clamp(u))

    def counters(self, x):
        """Per-state event flags accumulated into episode metrics."""
        return {}

    def batch_step(self, x, u):
        raise NotImplementedError

    def batch_basic_reward(self, x, u):
        raise NotImplementedError

    def batch_addon_reward(self, x, u):
        raise NotImplementedError

    def reset(self, rng=None):
        raise NotImplementedError


class PointMass(Env):
    """Planar double integrator, layout ``(px, py, vx, vy)``.

    Position is advanced with the pre-update velocity, then velocity gains ``u*dt``.
    The basic task rewards x-progress with a control cost, the add-on rewards
    y-progress; since ``dpx = vx*dt`` exactly, ``dpx/dt`` is evaluated as ``vx``.
    """

    env_id = "point_mass"

    def __init__(self, dt=0.1, omega=1.0, horizon_limit=50, action_bound=1.0, control_cost=0.1):
        self.spec = EnvSpec(
            name=self.env_id,
            state_dim=4,
            action_dim=2,
            action_low=[-action_bound] * 2,
            action_high=[action_bound] * 2,
            dt=dt,
            omega=omega,
            horizon_limit=horizon_limit,
            state_labels=("px[m]", "py[m]", "vx[m/s]", "vy[m/s]"),
            action_labels=("ax[m/s^2]", "ay[m/s^2]"),
        )
        self.control_cost = control_cost

    def batch_step(self, x, u):
        dt = self.spec.dt
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
        out[..., 0] = x[..., 0] + x[..., 2] * dt
        out[..., 1] = x[..., 1] + x[..., 3] * dt
        out[..., 2] = x[..., 2] + u[..., 0] * dt
        out[..., 3] = x[..., 3] + u[..., 1] * dt
        return out

    def batch_basic_reward(self, x, u):
        return x[..., 2] - self.control_cost * np.sum(u * u, axis=-1)

    def batch_addon_reward(self, x, u):
        return x[..., 3] + 0.0 * u[..., 0]

    def reset(self, rng=None):
        return np.zeros(4)


def wrap_angle(a):
    """Map angles into [-pi, pi)."""
    return (a + np.pi) % (2.0 * np.pi) - np.pi


class Pendulum(Env):
    """Frictionless torque-driven pendulum, layout ``(theta, theta_dot)``, upright at 0."""

    env_id = "pendulum"

    def __init__(self, dt=0.05, omega=1.0, horizon_limit=100, max_torque=2.0, gravity=9.81, mass=1.0, length=1.0):
        self.spec = EnvSpec(
            name=self.env_id,
            state_dim=2,
            action_dim=1,
            action_low=[-max_torque],
            action_high=[max_torque],
            dt=dt,
            omega=omega,
            horizon_limit=horizon_limit,
            angle_dims=(0,),
            state_labels=("theta[rad]", "theta_dot[rad/s]"),
            action_labels=("torque[N*m]",),
        )
        self.gravity = gravity
        self.mass = mass
        self.length = length

    def batch_step(self, x, u):
        dt = self.spec.dt
        th = x[..., 0]
        thd = x[..., 1]
        acc = (self.gravity / self.length) * np.sin(th) + u[..., 0] / (self.mass * self.length**2)
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
        out[..., 0] = wrap_angle(th + thd * dt)
        out[..., 1] = thd + acc * dt
        return out

    def batch_basic_reward(self, x, u):
        th = wrap_angle(x[..., 0])
        return -(th * th + 0.1 * x[..., 1] ** 2 + 0.001 * u[..., 0] ** 2)

    def batch_addon_reward(self, x, u):
        return -np.abs(x[..., 1]) + 0.0 * u[..., 0]

    def reset(self, rng=None):
        if rng is None:
            return np.zeros(2)
        return np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)])


@dataclass(eq=False)
class CarTrack:
    """Polyline centerline with a half-width per waypoint.

    For a closed track the last waypoint connects back to the first; do not repeat
    the first point in ``centerline``.
    """

    centerline: np.ndarray
    half_width: np.ndarray
    closed: bool = True
    _seg: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.centerline = np.ascontiguousarray(self.centerline, dtype=float)
        self.half_width = np.ascontiguousarray(self.half_width, dtype=float)
        if self.centerline.ndim != 2 or self.centerline.shape[1] != 2 or len(self.centerline) < 2:
            raise ValueError("track needs at least two 2D waypoints")
        if self.half_width.shape != (len(self.centerline),):
            raise ValueError("half_width must have one entry per waypoint")
        if not np.all(self.half_width > 0):
            raise ValueError("half_width must be positive everywhere")
        starts = self.centerline
        ends = np.roll(self.centerline, -1, axis=0) if self.closed else self.centerline[1:]
        starts = starts[: len(ends)]
        hw_end = np.roll(self.half_width, -1) if self.closed else self.half_width[1:]
        deltas = ends - starts
        seg_len2 = np.sum(deltas * deltas, axis=1)
        if np.any(seg_len2 == 0):
            raise ValueError("track has repeated consecutive waypoints")
        seg_len = np.sqrt(seg_len2)
        cum_s = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
        self._seg = dict(
            starts=np.ascontiguousarray(starts),
            deltas=np.ascontiguousarray(deltas),
            seg_len2=seg_len2,
            seg_len=seg_len,
            cum_s=cum_s,
            hw_start=np.ascontiguousarray(self.half_width[: len(ends)]),
            hw_end=np.ascontiguousarray(hw_end),
        )
        self.total_length = float(np.sum(seg_len))

    def project(self, points):
        """Return ``(d_center, d_map, s)`` for one point or a batch of points."""
        points = np.asarray(points, dtype=float)
        lead = points.shape[:-1]
        g = self._seg
        d, dmap, s = kernels.project_points(
            points.reshape(-1, 2), g["starts"], g["deltas"], g["seg_len2"], g["seg_len"],
            g["cum_s"], g["hw_start"], g["hw_end"],
        )
        return d.reshape(lead), dmap.reshape(lead), s.reshape(lead)

    def point_at(self, s):
        """Centerline point at arc length ``s`` (wrapped for closed tracks)."""
        g = self._seg
        s = np.asarray(s, dtype=float)
        if self.closed:
            s = np.mod(s, self.total_length)
        j = np.clip(np.searchsorted(g["cum_s"], s, side="right") - 1, 0, len(g["cum_s"]) - 1)
        t = np.clip((s - g["cum_s"][j]) / g["seg_len"][j], 0.0, 1.0)
        return g["starts"][j] + t[..., None] * g["deltas"][j]

    def heading_at(self, index):
        d = self._seg["deltas"][index % len(self._seg["deltas"])]
        return float(np.arctan2(d[1], d[0]))

    @classmethod
    def oval(cls, straight=40.0, radius=15.0, half_width=3.0, n_arc=24, n_straight=8):
        """Stadium-shaped track traversed counter-clockwise, starting mid bottom straight."""
        pts = []
        h = straight / 2.0
        for i in range(n_straight // 2):
            pts.append((i * h / (n_straight // 2), -radius))
        for i in range(n_arc):
            a = -np.pi / 2 + np.pi * i / n_arc
            pts.append((h + radius * np.cos(a), radius * np.sin(a)))
        for i in range(n_straight):
            pts.append((h - i * straight / n_straight, radius))
        for i in range(n_arc):
            a = np.pi / 2 + np.pi * i / n_arc
            pts.append((-h + radius * np.cos(a), radius * np.sin(a)))
        for i in range(n_straight // 2):
            pts.append((-h + i * h / (n_straight // 2), -radius))
        pts = np.array(pts)
        return cls(pts, np.full(len(pts), half_width))

    @classmethod
    def from_file(cls, path):
        """Load a ``x y half_width`` per line file; the loop must close within 1e-6 m."""
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'x y half_width', got {line!r}")
            rows.append([float(p) for p in parts])
        if len(rows) < 3:
            raise ValueError(f"{path}: track needs at least three rows")
        arr = np.array(rows)
        if np.linalg.norm(arr[0, :2] - arr[-1, :2]) > 1e-6:
            raise ValueError(f"{path}: track does not close (first and last waypoint differ by more than 1e-6 m)")
        return cls(arr[:-1, :2], arr[:-1, 2], closed=True)

    def to_file(self, path):
        lines = ["# x[m] y[m] half_width[m]; last row repeats the first to close the loop"]
        pts = np.vstack([self.centerline, self.centerline[:1]])
        hw = np.concatenate([self.half_width, self.half_width[:1]])
        lines += [f"{p[0]:.9f} {p[1]:.9f} {w:.9f}" for p, w in zip(pts, hw)]
        Path(path).write_text("\n".join(lines) + "\n")


class Car(Env):
    """Kinematic bicycle on a track, layout ``(x, y, heading, speed)``, action ``(steer, accel)``.

    The add-on reward is the off-course penalty ``-C * relu(d_center^2 - d_map^2)``
    evaluated at the current state.
    """

    env_id = "car"

    def __init__(self, track=None, dt=0.1, omega=1.0, horizon_limit=300, wheelbase=2.5,
                 max_steer=0.4, max_accel=3.0, addon_coef=1e4, control_cost=0.01, start_speed=8.0):
        self.track = track if track is not None else default_track()
        self.spec = EnvSpec(
            name=self.env_id,
            state_dim=4,
            action_dim=2,
            action_low=[-max_steer, -max_accel],
            action_high=[max_steer, max_accel],
            dt=dt,
            omega=omega,
            horizon_limit=horizon_limit,
            angle_dims=(2,),
            state_labels=("x[m]", "y[m]", "heading[rad]", "speed[m/s]"),
            action_labels=("steer[rad]", "accel[m/s^2]"),
        )
        self.wheelbase = wheelbase
        self.addon_coef = addon_coef
        self.control_cost = control_cost
        self.start_speed = start_speed

    def batch_step(self, x, u):
        lead = x.shape[:-1]
        out = kernels.bicycle_step(x.reshape(-1, 4), u.reshape(-1, 2), self.wheelbase, self.spec.dt)
        return out.reshape(lead + (4,))

    def progress(self, x, x_next):
        _, _, s0 = self.track.project(x[..., :2])
        _, _, s1 = self.track.project(x_next[..., :2])
        ds = s1 - s0
        if self.track.closed:
            L = self.track.total_length
            ds = (ds + 0.5 * L) % L - 0.5 * L
        return ds

    def batch_basic_reward(self, x, u):
        ds = self.progress(x, self.batch_step(x, u))
        return ds / self.spec.dt - self.control_cost * np.sum(u * u, axis=-1)

    def batch_addon_reward(self, x, u):
        d, dmap, _ = self.track.project(x[..., :2])
        return -self.addon_coef * np.maximum(d * d - dmap * dmap, 0.0)

    def counters(self, x):
        d, dmap, _ = self.track.project(np.asarray(x, dtype=float)[..., :2])
        return {"off_course": bool(d > dmap)}

    def reset(self, rng=None):
        p = self.track.centerline[0]
        return np.array([p[0], p[1], self.track.heading_at(0), self.start_speed])


def default_track():
    path = Path(__file__).with_name("data") / "oval.track"
    if path.exists():
        return CarTrack.from_file(path)
    return CarTrack.oval()


ENV_IDS = ("point_mass", "pendulum", "car")


def make_env(env_id, **kwargs):
    if env_id == "point_mass":
        return PointMass(**kwargs)
    if env_id == "pendulum":
        return Pendulum(**kwargs)
    if env_id == "car":
        track_file = kwargs.pop("track_file", None)
        if track_file is not None:
            kwargs["track"] = CarTrack.from_file(track_file)
        return Car(**kwargs)
    raise ValueError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")
