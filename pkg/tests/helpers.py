"""Shared numeric oracles for the test suite."""

import numpy as np


def fd_gradient(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function at x.

    Args:
        f: function mapping an ndarray to a python float.
        x: point of evaluation, any shape; not modified.
        h: step size.

    Returns:
        Array of x's shape holding d f / d x_i estimates.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        xp = x.reshape(-1).copy()
        xm = xp.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return g


def rel_err(got, want):
    """Max absolute deviation normalized by the reference scale."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.max(np.abs(want))), 1e-12)
    return float(np.max(np.abs(got - want)) / scale)
