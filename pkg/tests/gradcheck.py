"""Central finite-difference gradient oracle used across the test suite."""
from __future__ import annotations

import numpy as np

import xadapter.numerics as nm
from xadapter.numerics import Tensor


def numeric_grad(f, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f with respect to tensor."""
    grad = np.zeros_like(tensor.data)
    if tensor.data.ndim == 0:
        orig = float(tensor.data)
        tensor.data = np.asarray(orig + h)
        up = f()
        tensor.data = np.asarray(orig - h)
        down = f()
        tensor.data = np.asarray(orig)
        return np.asarray((up - down) / (2 * h))
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-coordinate relative error with a unit floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / scale).max())


def check_gradients(make_loss, parameters, tol: float, h: float = 1e-5) -> float:
    """Compare backward() gradients of make_loss() against finite differences.

    ``make_loss`` builds a fresh scalar loss Tensor from current parameter
    values; ``parameters`` is an iterable of (name, Tensor). Returns the
    worst relative error observed and asserts it is within ``tol``.
    """
    params = list(parameters)
    for _, p in params:
        p.zero_grad()
    loss = make_loss()
    nm.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    def value():
        return float(make_loss().data)

    worst = 0.0
    worst_name = None
    for name, p in params:
        fd = numeric_grad(value, p, h=h)
        err = max_rel_error(analytic[name], fd)
        if err > worst:
            worst, worst_name = err, name
    assert worst < tol, f"gradient mismatch at {worst_name}: rel err {worst:.3e} >= {tol}"
    for _, p in params:
        p.zero_grad()
    return worst
