"""Small module system: parameter registry, standard layers, train/eval mode."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .autodiff import DEFAULT_DTYPE, Tensor


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DEFAULT_DTYPE)


class Module:
    """Base class tracking child modules, learnable tensors and buffers in insertion order.

    Frozen state (non-learnable primitive weights, masks) is kept as plain
    numpy arrays registered through :meth:`register_frozen` so it is visible to
    accounting and dtype casts but never to the optimizer.
    """

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_frozen", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def register_frozen(self, name: str, value: np.ndarray) -> None:
        self._frozen[name] = value
        object.__setattr__(self, name, value)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        yield from self._modules.items()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for path, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{path}.{name}" if path else name), p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{path}.{name}" if path else name), b

    def named_frozen(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules(prefix):
            for name, b in mod._frozen.items():
                yield (f"{path}.{name}" if path else name), b

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        """Cast learnable tensors, buffers and frozen state in place (used for float64 checks)."""
        for _, mod in self.named_modules():
            for p in mod._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for store in (mod._buffers, mod._frozen):
                for name in list(store):
                    store[name] = store[name].astype(dtype)
                    object.__setattr__(mod, name, store[name])
            mod._cast_extra(dtype)
        return self

    def _cast_extra(self, dtype) -> None:
        """Hook for modules holding dtype-sensitive state outside the registries."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._modules)), m)

    def __getitem__(self, i: int) -> Module:
        return self._modules[str(i)]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


class Conv2d(Module):
    """Learnable convolution; bias on by default, He fan-in initialisation."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: Optional[int] = None, groups: int = 1,
                 bias: bool = True):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ops.ShapeError(
                f"Conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        self.weight = parameter(he_normal(rng, (c_out, c_in // groups, k, k), fan_in))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.scale = parameter(np.ones(c))
        self.shift = parameter(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(c, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, (d_out, d_in)))
        self.bias = parameter(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
