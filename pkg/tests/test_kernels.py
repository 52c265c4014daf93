import os
import subprocess
import sys

import numpy as np
import pytest

from fedsim import _kernels


def _problem(seed, n=60, d=5, k=4):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.integers(0, k, size=n)
    W = rng.normal(scale=0.3, size=(d, k))
    b = rng.normal(scale=0.3, size=k)
    order = rng.permutation(n)
    return W, b, X, y, order


def _run(kernel, problem, batch_size, lr=0.05):
    W, b, X, y, order = (a.copy() for a in problem)
    kernel(W, b, X, y, order, batch_size, lr)
    return W, b


@pytest.mark.parametrize("batch_size", [1, 3, 7, 60, 100])
@pytest.mark.parametrize("seed", range(4))
def test_numpy_matches_reference_loops(seed, batch_size):
    prob = _problem(seed)
    Wn, bn = _run(_kernels.sgd_epoch_numpy, prob, batch_size)
    Wl, bl = _run(_kernels._sgd_epoch_loops, prob, batch_size)
    np.testing.assert_allclose(Wn, Wl, rtol=0, atol=1e-12)
    np.testing.assert_allclose(bn, bl, rtol=0, atol=1e-12)


@pytest.mark.skipif(_kernels.sgd_epoch_numba is None, reason="numba unavailable")
@pytest.mark.parametrize("batch_size", [1, 4, 60])
@pytest.mark.parametrize("seed", range(4))
def test_numba_matches_numpy(seed, batch_size):
    prob = _problem(seed)
    Wj, bj = _run(_kernels.sgd_epoch_numba, prob, batch_size)
    Wn, bn = _run(_kernels.sgd_epoch_numpy, prob, batch_size)
    np.testing.assert_allclose(Wj, Wn, rtol=0, atol=1e-12)
    np.testing.assert_allclose(bj, bn, rtol=0, atol=1e-12)


@pytest.mark.skipif(_kernels.sgd_epoch_numba is None, reason="numba unavailable")
def test_numba_is_deterministic():
    prob = _problem(9, n=300)
    a = _run(_kernels.sgd_epoch_numba, prob, 1)
    b = _run(_kernels.sgd_epoch_numba, prob, 1)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_empty_order_is_a_no_op():
    W, b, X, y, _ = _problem(0)
    W0, b0 = W.copy(), b.copy()
    _kernels.sgd_epoch(W, b, X, y, np.array([], dtype=np.int64), 2, 0.1)
    assert np.array_equal(W, W0) and np.array_equal(b, b0)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy")])
def test_env_flag_selects_numpy(flag, expected):
    env = {**os.environ, "FEDSIM_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", "from fedsim import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
