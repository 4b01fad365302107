"""Central finite-difference gradient oracle, independent of the backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn / d param by central differences, perturbing param.data in place."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check(build: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter between backward() and finite differences.

    build() must rebuild the scalar loss from the current parameter values.
    """
    T.zero_grad(params)
    T.backward(build())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    errors = {}
    for i, (p, a) in enumerate(zip(params, analytic)):
        n = numeric_grad(lambda: build().item(), p, h)
        errors[p.name or f"param{i}"] = rel_error(a, n)
    return errors
