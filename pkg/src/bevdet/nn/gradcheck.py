"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Module


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3, atol: float = 1e-7) -> float:
    """Largest elementwise relative error.

    The denominator never drops below ``floor`` times the largest gradient
    magnitude in the tensor, so entries that are essentially zero are judged
    against the scale of the whole tensor rather than against themselves.
    A tensor whose entries are all below ``atol`` in both gradients counts as
    exactly zero (e.g. a conv bias feeding a batch norm); ``atol`` sits above
    the round-off of a float64 difference quotient with steps down to 1e-5.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(n).max(), np.abs(a).max())
    if scale <= atol:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / denom).max())


def sample_input(shape, seed: int, margin: float = 0.0) -> np.ndarray:
    """Standard-normal input with every |value| >= ``margin``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    if margin:
        x = np.where(x >= 0, x + margin, x - margin)
    return x


def grad_check(
    layer: Module,
    input_shape,
    seed: int = 0,
    *,
    h: float = 1e-3,
    margin: float = 0.0,
    x: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar loss is ``sum(out * R)`` for a fixed random ``R``; the plain
    sum of outputs has an identically zero gradient through normalization
    and softmax layers. ``layer`` is converted to float64 in place. Every
    parameter and every input element is checked.
    """
    layer.astype(np.float64)
    x = sample_input(input_shape, seed, margin) if x is None else np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    out = layer.forward(x)
    proj = rng.standard_normal(out.shape)

    def loss() -> float:
        return float((layer.forward(x) * proj).sum())

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj.copy())
    analytic = {name: g.copy() for name, _, g in layer.named_parameters()}

    worst = relative_error(dx, numeric_gradient(loss, x, h))
    for name, p, _ in layer.named_parameters():
        worst = max(worst, relative_error(analytic[name], numeric_gradient(loss, p, h)))
    return worst
