import os
import subprocess
import sys

import numpy as np
import pytest

from remoh_lab import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba path disabled")


@needs_numba
@pytest.mark.parametrize("shape", [(1, 1), (7, 13), (64, 169)])
def test_numba_matches_numpy(shape, rng):
    x = rng.normal(0, 5, shape)
    t = rng.integers(0, shape[1], shape[0])
    g = rng.normal(size=shape)
    y = K.numpy_softmax_rows(x)
    assert np.max(np.abs(K.numba_softmax_rows(x) - y)) < 1e-14
    assert np.max(np.abs(K.numba_softmax_rows_grad(y, g) - K.numpy_softmax_rows_grad(y, g))) < 1e-13
    l1, p1 = K.numpy_cross_entropy(x, t)
    l2, p2 = K.numba_cross_entropy(x, t)
    assert abs(l1 - l2) < 1e-12 and np.max(np.abs(p1 - p2)) < 1e-14
    assert np.max(np.abs(K.numba_cross_entropy_grad(p1, t) - K.numpy_cross_entropy_grad(p1, t))) < 1e-15
    s = np.maximum(x, 0)
    mask = rng.random(shape[0]) < 0.7
    assert np.array_equal(K.numba_active_counts(s, mask), K.numpy_active_counts(s, mask))


def test_active_counts_hand_tally():
    s = np.array([[0.0, 0.3], [0.1, 0.0], [0.2, 0.5]])
    assert K.active_counts(s, np.array([True, True, False])).tolist() == [1, 1]


def test_env_var_selects_numpy_backend():
    env = dict(os.environ, REMOH_LAB_NO_NUMBA="1")
    code = "from remoh_lab import _kernels as K; print(K.BACKEND, K.HAVE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False"]
