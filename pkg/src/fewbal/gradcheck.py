"""Central-difference gradient checking for the hand-written backward passes."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from fewbal.nn import ParamTensor


def numeric_grad(loss_fn: Callable[[], float], values: np.ndarray,
                 h: float = 1e-5) -> np.ndarray:
    """Central differences of loss_fn with respect to values, mutated in place."""
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_grad_error(loss_fn: Callable[[], float],
                       backward_fn: Callable[[], None],
                       params: Sequence[ParamTensor],
                       h: float = 1e-5,
                       floor: float = 1e-5) -> float:
    """Worst relative disagreement between analytic and numeric gradients.

    backward_fn must leave gradients in param.grad; loss_fn must be a pure
    re-evaluation (no parameter updates). The denominator is floored at
    ``floor`` so near-zero entries compare absolutely: central differences
    carry cancellation noise around eps * |loss| / h, so entries smaller
    than the floor are below what the numeric side can resolve. Raise the
    floor when the loss itself is large.
    """
    for p in params:
        p.zero_grad()
    backward_fn()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_grad(loss_fn, p.values, h=h)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
        err = float(np.max(np.abs(numeric - analytic) / denom))
        worst = max(worst, err)
    return worst
