"""Finite-difference gradients and Hessian-vector products."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import ContractError, NumericOverflowError


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = float(f(x))
        flat[k] = old - h
        fm = float(f(x))
        flat[k] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericOverflowError(f"non-finite function value at coordinate {k}")
        g[k] = (fp - fm) / (2.0 * h)
    return grad


def default_hvp_eps(point) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(point), initial=0.0)))


def hvp_fd(grad_fn: Callable[[np.ndarray], np.ndarray], point, vector, eps: float | None = None) -> np.ndarray:
    """Hessian-vector product from a central difference of gradients.

    ``grad_fn`` maps a point to the gradient of the loss there. The step is
    taken along the unit direction of ``vector`` and the result rescaled by
    its norm, which keeps the perturbation size independent of ``|vector|``.
    """
    point = np.asarray(point, dtype=np.float64)
    vector = np.asarray(vector, dtype=np.float64)
    if point.shape != vector.shape:
        raise ContractError(f"hvp_fd: point shape {point.shape} differs from vector shape {vector.shape}")
    if eps is None:
        eps = default_hvp_eps(point)
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        return np.zeros_like(point)
    u = vector / norm
    gp = np.asarray(grad_fn(point + eps * u), dtype=np.float64)
    gm = np.asarray(grad_fn(point - eps * u), dtype=np.float64)
    out = (gp - gm) * (norm / (2.0 * eps))
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError("hvp_fd produced a non-finite value")
    return out


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom
