import os
import subprocess
import sys

import numpy as np
import pytest

from imted import _accel

needs_numba = pytest.mark.skipif(not _accel._HAVE_NUMBA, reason="numba not importable")


def _points(rng, n, H, W):
    return (rng.integers(0, 2, n), rng.uniform(-1.5, H + 0.5, n), rng.uniform(-1.5, W + 0.5, n))


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_gather_parity(dtype, rng):
    feat = rng.normal(size=(2, 5, 6, 7)).astype(dtype)
    b, ys, xs = _points(rng, 300, 6, 7)
    b, ys, xs = _accel._prep(ys, xs, b, np.float64)
    a = _accel.bilinear_gather_numpy(feat, b, ys, xs)
    n = _accel.bilinear_gather_numba(feat, b, ys, xs)
    np.testing.assert_allclose(a, n, rtol=1e-6 if dtype == np.float32 else 1e-12, atol=1e-6)


@needs_numba
def test_scatter_parity(rng):
    grad = rng.normal(size=(300, 5))
    b, ys, xs = _accel._prep(*_points(rng, 300, 6, 7)[1:], _points(rng, 300, 6, 7)[0], np.float64)
    a = _accel.bilinear_scatter_numpy(grad, b, ys, xs, (2, 5, 6, 7))
    n = _accel.bilinear_scatter_numba(grad, b, ys, xs, (2, 5, 6, 7))
    np.testing.assert_allclose(a, n, atol=1e-12)


def test_scatter_is_adjoint_of_gather(rng):
    feat = rng.normal(size=(2, 3, 4, 5))
    b, ys, xs = _points(rng, 50, 4, 5)
    g = rng.normal(size=(50, 3))
    lhs = (_accel.bilinear_gather(feat, b, ys, xs) * g).sum()
    rhs = (feat * _accel.bilinear_scatter(g, b, ys, xs, feat.shape)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_numba
def test_nms_parity(rng):
    xy = rng.uniform(0, 50, (400, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(1, 20, (400, 2))], 1)
    for t in (0.1, 0.5, 0.9):
        np.testing.assert_array_equal(_accel.nms_numpy(boxes, t), _accel.nms_numba(boxes, t))


def test_env_flag_selects_numpy():
    env = dict(os.environ, IMTED_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from imted import _accel; print(_accel.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
