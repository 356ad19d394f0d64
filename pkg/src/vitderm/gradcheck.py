"""Central finite-difference gradient checking.

The numerical side only ever calls the forward function, so it stays
independent of the backward rules it is used to verify.
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central difference of the scalar ``fn()`` with respect to ``tensor.data``.

    ``fn`` must be deterministic: any randomness (dropout masks, rrelu slopes)
    has to be re-seeded on each call.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.shape)


ZERO_GRAD_NORM = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||analytic - numeric|| / (||numeric|| + 1e-8)`` over one parameter tensor.

    When both norms are below ``ZERO_GRAD_NORM`` the true gradient is zero up
    to finite-difference roundoff (e.g. a bias cancelled by a following
    normalization); the absolute difference is returned instead.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    diff = np.linalg.norm(analytic - numeric)
    if np.linalg.norm(analytic) < ZERO_GRAD_NORM and np.linalg.norm(numeric) < ZERO_GRAD_NORM:
        return float(diff)
    return float(diff / (np.linalg.norm(numeric) + 1e-8))


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-6) -> Dict[str, float]:
    """Relative error per named parameter between backprop and central differences."""
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}
    return {name: relative_error(analytic[name], numerical_gradient(fn, p, h)) for name, p in params.items()}
