# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for rollout scoring.

Both functions mirror :mod:`resmppi._pykernels` operation by operation; the
projection agrees bitwise, the trig in the bicycle step to libm rounding.
"""

import numpy as np

from libc.math cimport cos, exp, sin, sqrt, tan, INFINITY


def project_points(double[:, ::1] points, double[:, ::1] starts, double[:, ::1] deltas,
                   double[::1] seg_len2, double[::1] seg_len, double[::1] cum_s,
                   double[::1] hw_start, double[::1] hw_end):
    """Nearest-point projection of ``points`` onto a polyline given by its segments.

    Returns ``(d_center, d_map, s)``. Ties go to the lowest segment index.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t m = starts.shape[0]
    cdef Py_ssize_t i, j, bj
    cdef double px, py, qx, qy, t, ex, ey, d2, best, bt

    d_out = np.empty(n, dtype=np.float64)
    dmap_out = np.empty(n, dtype=np.float64)
    s_out = np.empty(n, dtype=np.float64)
    cdef double[::1] dv = d_out
    cdef double[::1] mv = dmap_out
    cdef double[::1] sv = s_out

    for i in range(n):
        px = points[i, 0]
        py = points[i, 1]
        best = INFINITY
        bj = 0
        bt = 0.0
        for j in range(m):
            qx = px - starts[j, 0]
            qy = py - starts[j, 1]
            t = (qx * deltas[j, 0] + qy * deltas[j, 1]) / seg_len2[j]
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            ex = qx - t * deltas[j, 0]
            ey = qy - t * deltas[j, 1]
            d2 = ex * ex + ey * ey
            if d2 < best:
                best = d2
                bj = j
                bt = t
        dv[i] = sqrt(best)
        sv[i] = cum_s[bj] + bt * seg_len[bj]
        mv[i] = (1.0 - bt) * hw_start[bj] + bt * hw_end[bj]
    return d_out, dmap_out, s_out


def bicycle_step(double[:, ::1] x, double[:, ::1] u, double wheelbase, double dt):
    """Explicit-Euler kinematic bicycle over a batch of (already clamped) inputs."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double th, v
    out = np.empty((n, 4), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        th = x[i, 2]
        v = x[i, 3]
        o[i, 0] = x[i, 0] + v * cos(th) * dt
        o[i, 1] = x[i, 1] + v * sin(th) * dt
        o[i, 2] = th + (v / wheelbase) * tan(u[i, 0]) * dt
        o[i, 3] = v + u[i, 1] * dt
    return out


def mish_forward(double[:, ::1] z):
    """Mish activation and its derivative in one pass (one exp per element)."""
    cdef Py_ssize_t r = z.shape[0]
    cdef Py_ssize_t c = z.shape[1]
    cdef Py_ssize_t i, j
    cdef double x, n, w, d
    act = np.empty((r, c), dtype=np.float64)
    grad = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] a = act
    cdef double[:, ::1] g = grad
    for i in range(r):
        for j in range(c):
            x = z[i, j]
            n = exp(x if x < 20.0 else 20.0)
            w = n * (n + 2.0)
            d = w + 2.0
            a[i, j] = x * w / d
            g[i, j] = w / d + 4.0 * x * n * (n + 1.0) / (d * d)
    return act, grad
