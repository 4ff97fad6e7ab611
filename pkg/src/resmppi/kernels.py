"""Kernel backend selection.

The compiled extension is used when it was built; setting ``RESMPPI_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("RESMPPI_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"
    else:
        BACKEND = "cython"


def project_points(points, starts, deltas, seg_len2, seg_len, cum_s, hw_start, hw_end):
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    return _impl.project_points(points, starts, deltas, seg_len2, seg_len, cum_s, hw_start, hw_end)


def bicycle_step(x, u, wheelbase, dt):
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 4)
    u = np.ascontiguousarray(u, dtype=np.float64).reshape(-1, 2)
    return _impl.bicycle_step(x, u, float(wheelbase), float(dt))


def mish_forward(z):
    z = np.asarray(z, dtype=np.float64)
    shape = z.shape
    act, grad = _impl.mish_forward(np.ascontiguousarray(z.reshape(-1, shape[-1] if z.ndim else 1)))
    return act.reshape(shape), grad.reshape(shape)
