import os
import subprocess
import sys

import numpy as np
import pytest

from resmppi import _pykernels, kernels
from resmppi.envs import CarTrack

try:
    from resmppi import _ckernels
except ImportError:
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def segments():
    g = CarTrack.oval()._seg
    return tuple(g[k] for k in ("starts", "deltas", "seg_len2", "seg_len", "cum_s", "hw_start", "hw_end"))


def test_python_projection_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-40, 40, size=(50, 2))
    seg = segments()
    d, dmap, s = _pykernels.project_points(pts, *seg)
    starts, deltas = seg[0], seg[1]
    for i, p in enumerate(pts):
        t = np.clip(np.sum((p - starts) * deltas, axis=1) / seg[2], 0, 1)
        dist = np.linalg.norm(starts + t[:, None] * deltas - p, axis=1)
        assert d[i] == pytest.approx(dist.min(), abs=1e-12)


def test_python_bicycle_step():
    x = np.array([[0.0, 0.0, 0.0, 10.0]])
    u = np.array([[0.0, 2.0]])
    np.testing.assert_allclose(_pykernels.bicycle_step(x, u, 2.5, 0.1), [[1.0, 0.0, 0.0, 10.2]])


@needs_ext
def test_backends_agree():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-40, 60, size=(500, 2))
    seg = segments()
    for a, b in zip(_pykernels.project_points(pts, *seg), _ckernels.project_points(pts, *seg)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    x = np.column_stack([pts, rng.uniform(-3, 3, 500), rng.uniform(0, 20, 500)])
    u = rng.uniform(-0.5, 0.5, size=(500, 2))
    np.testing.assert_allclose(_pykernels.bicycle_step(x, u, 2.5, 0.1), _ckernels.bicycle_step(x, u, 2.5, 0.1),
                               rtol=0, atol=1e-12)
    z = rng.normal(scale=10, size=(40, 7))
    z[0, :3] = [-800.0, 0.0, 800.0]
    for a, b in zip(_pykernels.mish_forward(z), _ckernels.mish_forward(z)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


def test_mish_gradient():
    z = np.linspace(-6, 6, 25).reshape(5, 5)
    _, g = kernels.mish_forward(z)
    h = 1e-6
    fd = (kernels.mish_forward(z + h)[0] - kernels.mish_forward(z - h)[0]) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-9)


def test_mish_keeps_shape():
    z = np.ones((2, 3, 4))
    assert kernels.mish_forward(z)[0].shape == (2, 3, 4)


@pytest.mark.parametrize("flag, expected", [("1", "python"), ("0", None)])
def test_environment_switch(flag, expected):
    env = dict(os.environ, RESMPPI_PURE_PYTHON=flag)
    out = subprocess.run([sys.executable, "-c", "from resmppi import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    want = expected or ("cython" if _ckernels is not None else "python")
    assert out.stdout.strip() == want
