"""Adam with per-parameter state, so subsets of parameters can step independently."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param_name = name


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a named parameter registry.

    Each parameter keeps its own step counter: in steady-state multi-task
    training the shared branch steps once per task while a task branch steps
    only when its task is active.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = AdamState(lr, beta1, beta2, eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)
            self.state.steps[name] = 0

    def step(self, names: Optional[Iterable[str]] = None) -> None:
        """Update the named parameters (all by default) from their ``.grad``.

        Parameters without a gradient are skipped. All gradients are validated
        before any parameter moves, so a non-finite gradient leaves the model
        untouched.
        """
        names = list(self.params) if names is None else list(names)
        todo = []
        for name in names:
            p = self.params[name]
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
            todo.append((name, p))
        for name, p in todo:
            adam_step(p, p.grad, name, self.state)

    def zero_grad(self, names: Optional[Iterable[str]] = None) -> None:
        for name in (self.params if names is None else names):
            self.params[name].grad = None


def adam_step(p: Tensor, grad: np.ndarray, name: str, state: AdamState) -> None:
    """One Adam update of ``p`` in place."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(name)
    s = state
    t = s.steps[name] + 1
    s.steps[name] = t
    dt = p.data.dtype
    m = s.m[name]
    v = s.v[name]
    m *= s.beta1
    m += (1 - s.beta1) * grad
    v *= s.beta2
    v += (1 - s.beta2) * (grad * grad)
    m_hat = m / (1 - s.beta1 ** t)
    v_hat = v / (1 - s.beta2 ** t)
    p.data = (p.data - s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(dt)
