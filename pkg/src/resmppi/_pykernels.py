"""Pure numpy versions of the compiled kernels (fallback and reference)."""

import numpy as np


def project_points(points, starts, deltas, seg_len2, seg_len, cum_s, hw_start, hw_end):
    """Nearest-point projection of ``points`` onto a polyline given by its segments.

    Returns ``(d_center, d_map, s)``. Ties go to the lowest segment index.
    """
    qx = points[:, 0:1] - starts[None, :, 0]
    qy = points[:, 1:2] - starts[None, :, 1]
    t = (qx * deltas[None, :, 0] + qy * deltas[None, :, 1]) / seg_len2[None, :]
    np.clip(t, 0.0, 1.0, out=t)
    ex = qx - t * deltas[None, :, 0]
    ey = qy - t * deltas[None, :, 1]
    d2 = ex * ex + ey * ey
    bj = np.argmin(d2, axis=1)
    rows = np.arange(points.shape[0])
    bt = t[rows, bj]
    d_center = np.sqrt(d2[rows, bj])
    s = cum_s[bj] + bt * seg_len[bj]
    d_map = (1.0 - bt) * hw_start[bj] + bt * hw_end[bj]
    return d_center, d_map, s


def bicycle_step(x, u, wheelbase, dt):
    """Explicit-Euler kinematic bicycle over a batch of (already clamped) inputs."""
    th = x[:, 2]
    v = x[:, 3]
    out = np.empty((x.shape[0], 4))
    out[:, 0] = x[:, 0] + v * np.cos(th) * dt
    out[:, 1] = x[:, 1] + v * np.sin(th) * dt
    out[:, 2] = th + (v / wheelbase) * np.tan(u[:, 0]) * dt
    out[:, 3] = v + u[:, 1] * dt
    return out


def mish_forward(z):
    """Mish activation and its derivative in one pass (one exp per element)."""
    n = np.exp(np.minimum(z, 20.0))
    w = n * (n + 2.0)
    d = w + 2.0
    return z * w / d, w / d + 4.0 * z * n * (n + 1.0) / (d * d)
