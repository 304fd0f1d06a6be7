"""Central finite-difference gradient checks, recomputed in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(f: Callable[[], float], t: Tensor, step: float = 1e-4) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return grad


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
                    seed: int = 0) -> dict[int, float]:
    """Compare backward() against central differences for every input requiring grad.

    ``fn(*inputs)`` must return a tensor; it is reduced to a scalar by a fixed
    random projection so every output element contributes. Inputs are cast to
    float64 in place before checking. Returns ``{input index: max rel error}``.
    """
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.grad = None
    out0 = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out0.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * proj))

    out = fn(*inputs)
    loss = (out * Tensor(proj, dtype=np.float64)).sum()
    backward(loss)
    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        errors[i] = relative_error(analytic, numerical_gradient(scalar, t, step))
    return errors
