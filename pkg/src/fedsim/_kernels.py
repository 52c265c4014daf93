"""Hot loops for local SGD.

Two interchangeable implementations live here: a numba-compiled one and a
plain numpy one. ``FEDSIM_NUMBA=0`` in the environment forces the numpy path;
otherwise numba is used when it imports. Each backend is deterministic on its
own, but the two are not guaranteed to agree bit-for-bit (libm ``exp`` and
summation order differ), so never mix backends inside one experiment.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("FEDSIM_NUMBA", "1").strip().lower()

try:
    if _FLAG in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by FEDSIM_NUMBA")
    from numba import njit
except ImportError:
    njit = None

BACKEND = "numba" if njit is not None else "numpy"


def sgd_epoch_numpy(W, b, X, y, order, batch_size, lr):
    """One pass of minibatch SGD on softmax regression, in place."""
    n = order.shape[0]
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb = X[idx]
        z = xb @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(idx.shape[0]), y[idx]] -= 1.0
        p /= idx.shape[0]
        W -= lr * (xb.T @ p)
        b -= lr * p.sum(axis=0)


def _sgd_epoch_loops(W, b, X, y, order, batch_size, lr):
    n = order.shape[0]
    d = W.shape[0]
    k = W.shape[1]
    gW = np.empty((d, k))
    gb = np.empty(k)
    z = np.empty(k)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        m = stop - start
        gW[:, :] = 0.0
        gb[:] = 0.0
        for t in range(start, stop):
            i = order[t]
            zmax = -np.inf
            for c in range(k):
                acc = b[c]
                for j in range(d):
                    acc += X[i, j] * W[j, c]
                z[c] = acc
                if acc > zmax:
                    zmax = acc
            total = 0.0
            for c in range(k):
                z[c] = np.exp(z[c] - zmax)
                total += z[c]
            for c in range(k):
                g = z[c] / total
                if c == y[i]:
                    g -= 1.0
                gb[c] += g
                for j in range(d):
                    gW[j, c] += X[i, j] * g
        scale = lr / m
        for c in range(k):
            b[c] -= scale * gb[c]
            for j in range(d):
                W[j, c] -= scale * gW[j, c]


if njit is not None:
    sgd_epoch_numba = njit(cache=True, nogil=True)(_sgd_epoch_loops)
    sgd_epoch = sgd_epoch_numba
else:
    sgd_epoch_numba = None
    sgd_epoch = sgd_epoch_numpy
