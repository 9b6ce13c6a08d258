"""Shared numerical oracles for the test suite."""

import numpy as np


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at flat array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + eps
        fp = f(x)
        x.flat[i] = old - eps
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * eps)
    return g


def store_fd(loss_of_store, params, eps=1e-6, indices=None):
    """Finite differences of ``loss_of_store(params)`` over selected flat indices."""
    indices = np.arange(len(params)) if indices is None else indices
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        old = params.values[i]
        params.values[i] = old + eps
        fp = loss_of_store(params)
        params.values[i] = old - eps
        fm = loss_of_store(params)
        params.values[i] = old
        out[j] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def randomize(params, rng, scale=0.5):
    """Replace every value (including zero-initialised output layers) with noise."""
    params.values[...] = scale * rng.standard_normal(len(params))
    return params
