"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import DTensor


def numerical_grad(fn: Callable[[], DTensor], x: DTensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences; ``fn`` must reread ``x.data``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(np.sum(fn().data))
        flat[i] = orig - h
        down = float(np.sum(fn().data))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm((analytic - numeric).ravel())
    scale = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-12)
    return float(diff / scale)


def check_gradients(
    fn: Callable[[], DTensor], inputs: Sequence[DTensor], h: float = 1e-5
) -> list[float]:
    """Relative error between backprop and finite differences for each input.

    ``fn`` builds a fresh graph on every call; a non-scalar output is summed.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    if out.size != 1:
        out.backward(np.ones_like(out.data))
    else:
        out.backward()
    errors = []
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        errors.append(relative_error(analytic, numerical_grad(fn, x, h)))
    return errors
