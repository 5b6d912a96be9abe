"""Central finite-difference gradient checking utilities."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. every entry of x."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(f: Callable[[], Tensor], params: Sequence[Tensor],
                eps: float = 1e-5, rtol: float = 1e-4) -> dict[int, float]:
    """Compare analytic grads of scalar ``f()`` against finite differences.

    Returns {param position: max relative error}; raises AssertionError on
    any error >= rtol.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    errors = {}
    for i, p in enumerate(params):
        num = numeric_grad(f, p, eps=eps)
        err = max_rel_error(analytic[i], num)
        errors[i] = err
        if err >= rtol:
            raise AssertionError(f"gradient check failed for param {i}: rel err {err:.3e}")
    return errors
