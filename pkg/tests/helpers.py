"""Shared test oracles: central finite differences over flat parameter views."""

import numpy as np


def finite_diff(f, x, step=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def assert_close_rel(got, want, rel=1e-4, atol=1e-7):
    got = np.asarray(got)
    want = np.asarray(want)
    if not np.allclose(got, want, rtol=rel, atol=atol):
        worst = np.max(np.abs(got - want) / np.maximum(np.abs(want), atol))
        raise AssertionError(f"gradient mismatch: worst relative error {worst:.3e}")
