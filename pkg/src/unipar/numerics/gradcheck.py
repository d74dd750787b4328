"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from unipar.numerics.tensor import Tape, Tensor, backward, no_grad

# Entries smaller than this are compared absolutely. Central-difference
# roundoff is about eps * |f| / h ~ 2e-11 for O(1) losses at h = 1e-5, so a
# true zero gradient reads as ~1e-11 noise; the floor keeps that below 1e-4.
REL_FLOOR = 1e-6


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences; ``f`` is re-evaluated without a tape."""
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().item())
            flat[i] = orig - h
            fm = float(f().item())
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def analytic_grads(f: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    return {k: p.grad_or_zeros().copy() for k, p in params.items()}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, REL_FLOOR)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                    h: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error between backward and finite differences."""
    for p in params.values():
        if p.data.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 tensors, {p!r} is {p.data.dtype}")
    grads = analytic_grads(f, params)
    return {k: relative_error(grads[k], numerical_grad(f, p, h)) for k, p in params.items()}
