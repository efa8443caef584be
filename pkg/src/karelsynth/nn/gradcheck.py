"""Central finite-difference gradient checking (float64)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

# Components whose analytic and numeric gradients are both below the floor
# are compared absolutely (|a - fd| <= tol * floor); everything else
# relatively. This keeps finite-difference truncation noise on near-zero
# components from masquerading as real errors.
REL_FLOOR = 1e-2


def numeric_gradient(loss_fn, param: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central differences of loss_fn() with respect to param, elementwise."""
    base = param.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn()
        flat[i] = keep - h
        down = loss_fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(build_loss, params: list[Tensor], h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    build_loss() must rebuild the graph from the given parameter tensors
    (their .data arrays are perturbed in place between evaluations).
    """
    loss = build_loss()
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        fd = numeric_gradient(lambda: build_loss().item(), p, h)
        worst = max(worst, max_rel_error(a, fd))
    return worst
