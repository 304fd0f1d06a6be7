"""Non-learnable primitives and the NLP feature-extraction layer.

An :class:`NlpLayer` runs ``k`` frozen primitives in parallel on the same
input, concatenates their outputs, interleaves channels so every contiguous
group of ``k`` holds one feature from each primitive, and learns a group-wise
1x1 linear combination of each group.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import DEFAULT_DTYPE, Tensor, make_result
from .nn import Module, ModuleList, he_normal, parameter

KINDS = ("avg_pool", "max_pool", "fixed_conv", "shift", "perturbation")
WEIGHT_STYLES = ("binary", "gaussian")


class PrimitiveConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: str
    kernel_size: int = 3
    sparsity: float = 0.5
    weight_style: str = "binary"
    depthwise: bool = True
    shift_step: int = 1
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise PrimitiveConfigError("kind", f"unknown primitive {self.kind!r}")
        if self.kind in ("avg_pool", "max_pool", "fixed_conv"):
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise PrimitiveConfigError(
                    "kernel_size", f"must be odd and positive, got {self.kernel_size}")
        if self.kind == "fixed_conv":
            if not 0.0 <= self.sparsity < 1.0:
                raise PrimitiveConfigError("sparsity", f"must lie in [0, 1), got {self.sparsity}")
            if self.weight_style not in WEIGHT_STYLES:
                raise PrimitiveConfigError("weight_style", f"unknown style {self.weight_style!r}")
        if self.kind == "shift" and self.shift_step < 0:
            raise PrimitiveConfigError("shift_step", f"must be >= 0, got {self.shift_step}")
        if self.kind == "perturbation" and not self.noise > 0:
            raise PrimitiveConfigError("noise", f"must be > 0, got {self.noise}")

    def to_dict(self) -> dict:
        return asdict(self)


# Table-1 winner with the ablation-guided hyperparameters.
DEFAULT_PRIMITIVES = (
    PrimitiveSpec("avg_pool", kernel_size=5),
    PrimitiveSpec("fixed_conv", kernel_size=3, sparsity=0.5, weight_style="binary", depthwise=True),
    PrimitiveSpec("perturbation", noise=0.1),
)


def _rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *salt])


class Primitive(Module):
    """A frozen ``C_in -> C_in`` map preserving spatial size."""

    kind = ""

    def __init__(self, spec: PrimitiveSpec, c_in: int, seed: int):
        super().__init__()
        self.spec, self.c_in, self.seed = spec, c_in, seed

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ops.ShapeError(
                f"{self.kind}: expected [N, {self.c_in}, H, W] input, got {x.shape}")

    def state(self) -> dict[str, np.ndarray]:
        return dict(self._frozen)

    def state_size(self) -> int:
        return sum(a.size for a in self._frozen.values())


class PoolPrimitive(Primitive):
    def __init__(self, spec, c_in, seed):
        super().__init__(spec, c_in, seed)
        self.kind = spec.kind
        self.pool_kind = "avg" if spec.kind == "avg_pool" else "max"

    def forward(self, x):
        self._check(x)
        k = self.spec.kernel_size
        return ops.pool2d(x, self.pool_kind, k, 1, k // 2)


class FixedConvPrimitive(Primitive):
    """Convolution with frozen binary or gaussian weights, a fixed fraction zeroed."""

    kind = "fixed_conv"

    def __init__(self, spec, c_in, seed):
        super().__init__(spec, c_in, seed)
        k = spec.kernel_size
        shape = (c_in, 1, k, k) if spec.depthwise else (c_in, c_in, k, k)
        rng = _rng(seed, 3, c_in)
        n = int(np.prod(shape))
        if spec.weight_style == "binary":
            flat = rng.integers(0, 2, n).astype(np.float64) * 2 - 1
        else:
            flat = rng.standard_normal(n)
        n_zero = int(np.floor(spec.sparsity * n))
        flat[rng.permutation(n)[:n_zero]] = 0.0
        self.register_frozen("weight", flat.reshape(shape).astype(DEFAULT_DTYPE))
        self.groups = c_in if spec.depthwise else 1

    def forward(self, x):
        self._check(x)
        w = Tensor(self.weight.astype(x.dtype, copy=False))
        return ops.conv2d(x, w, None, 1, self.spec.kernel_size // 2, self.groups)


SHIFT_CYCLE = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


def shift_offsets(c_in: int, step: int) -> np.ndarray:
    """Per-channel ``(dy, dx)``, cycling through up/down/left/right/still."""
    return np.array([SHIFT_CYCLE[c % len(SHIFT_CYCLE)] for c in range(c_in)], dtype=np.int64) * step


def _displace(a: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """``out[:, c, y + dy, x + dx] = a[:, c, y, x]``; vacated positions are zero."""
    out = np.zeros_like(a)
    h, w = a.shape[2:]
    for c, (dy, dx) in enumerate(offsets):
        if abs(dy) >= h or abs(dx) >= w:
            continue
        out[:, c, max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
            a[:, c, max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


class ShiftPrimitive(Primitive):
    kind = "shift"

    def __init__(self, spec, c_in, seed):
        super().__init__(spec, c_in, seed)
        self.register_frozen("offsets", shift_offsets(c_in, spec.shift_step))

    def _cast_extra(self, dtype):
        # offsets are integer displacements, not real-valued state
        self._frozen["offsets"] = self._frozen["offsets"].astype(np.int64)
        object.__setattr__(self, "offsets", self._frozen["offsets"])

    def forward(self, x):
        self._check(x)
        offsets = self.offsets

        def bw(g):
            return (_displace(g, -offsets),)

        return make_result(_displace(x.data, offsets), (x,), bw, "shift")


class PerturbationPrimitive(Primitive):
    """Adds a frozen ``U(-noise, noise)`` mask, one value per channel and position.

    The mask depends on the spatial size, so it is drawn the first time a size
    is seen (or eagerly via :meth:`materialize`) from a seed that mixes in
    ``(C_in, H, W)``; the same size therefore always yields the same mask.
    """

    kind = "perturbation"

    def mask(self, h: int, w: int) -> np.ndarray:
        key = f"mask_{h}x{w}"
        if key not in self._frozen:
            rng = _rng(self.seed, 5, self.c_in, h, w)
            nu = self.spec.noise
            self.register_frozen(key, rng.uniform(-nu, nu, (self.c_in, h, w)).astype(DEFAULT_DTYPE))
        return self._frozen[key]

    def materialize(self, h: int, w: int) -> None:
        self.mask(h, w)

    def forward(self, x):
        self._check(x)
        m = self.mask(*x.shape[2:]).astype(x.dtype, copy=False)
        return ops.add(x, Tensor(m[None]))


_PRIMITIVE_TYPES = {
    "avg_pool": PoolPrimitive,
    "max_pool": PoolPrimitive,
    "fixed_conv": FixedConvPrimitive,
    "shift": ShiftPrimitive,
    "perturbation": PerturbationPrimitive,
}


def make_primitive(spec: PrimitiveSpec, c_in: int, seed: Optional[int] = None) -> Primitive:
    spec.validate()
    if c_in < 1:
        raise PrimitiveConfigError("c_in", f"must be positive, got {c_in}")
    return _PRIMITIVE_TYPES[spec.kind](spec, c_in, spec.seed if seed is None else seed)


def channel_shuffle_permutation(channels: int, k: int) -> np.ndarray:
    """``perm[c*k + p] = p*C_in + c`` for ``channels = k * C_in``."""
    if k < 1 or channels % k:
        raise ops.ShapeError(f"channel_shuffle: {channels} channels not divisible by k={k}")
    c_in = channels // k
    return np.arange(channels).reshape(k, c_in).T.reshape(-1)


def channel_shuffle(y: Tensor, k: int) -> Tensor:
    return ops.permute_channels(y, channel_shuffle_permutation(y.shape[1], k))


def channel_unshuffle(y: Tensor, k: int) -> Tensor:
    perm = channel_shuffle_permutation(y.shape[1], k)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return ops.permute_channels(y, inv)


def group_assignment(c_in: int, c_out: int) -> np.ndarray:
    """Source group of every output channel: contiguous blocks ``o * C_in // C_out``."""
    return np.arange(c_out) * c_in // c_out


class NlpLayer(Module):
    """``k`` frozen primitives followed by a learnable group-wise 1x1 recombination.

    With ``uneven_groups=False`` the combiner is exactly a grouped 1x1
    convolution with ``groups = C_in`` and ``C_out`` must be a multiple of
    ``C_in``. With ``uneven_groups=True`` any ``C_out`` is accepted: output
    channel ``o`` still combines the ``k`` primitive features of one source
    channel, ``o * C_in // C_out``, so the learnable count stays ``k*C_out + C_out``.
    """

    def __init__(self, c_in: int, c_out: int, specs: Sequence[PrimitiveSpec] = DEFAULT_PRIMITIVES,
                 seed: int = 0, rng: Optional[np.random.Generator] = None,
                 uneven_groups: bool = False, spatial: Optional[tuple] = None):
        super().__init__()
        specs = tuple(specs)
        if not specs:
            raise PrimitiveConfigError("primitives", "at least one primitive is required")
        if c_in < 1 or c_out < 1:
            raise ops.ShapeError(f"NlpLayer: invalid channels in={c_in} out={c_out}")
        if not uneven_groups and c_out % c_in:
            raise ops.ShapeError(
                f"NlpLayer: C_out={c_out} must be divisible by C_in={c_in} for groups=C_in")
        self.c_in, self.c_out, self.k = c_in, c_out, len(specs)
        self.specs = specs
        self.seed = seed
        self.primitives = ModuleList(
            make_primitive(s, c_in, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            for i, s in enumerate(specs))
        if spatial is not None:
            for p in self.primitives:
                if isinstance(p, PerturbationPrimitive):
                    p.materialize(*spatial)
        rng = np.random.default_rng(seed) if rng is None else rng
        self.uneven = c_out % c_in != 0
        self.weight = parameter(he_normal(rng, (c_out, self.k, 1, 1), self.k))
        self.bias = parameter(np.zeros(c_out))
        groups = group_assignment(c_in, c_out)
        self.gather = (groups[:, None] * self.k + np.arange(self.k)[None, :]).reshape(-1)

    def extract(self, x: Tensor) -> Tensor:
        """Concatenated primitive features, shuffled into one-per-primitive groups."""
        y = ops.concat([p(x) for p in self.primitives], axis=1)
        return channel_shuffle(y, self.k)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ops.ShapeError(f"NlpLayer: expected {self.c_in} input channels, got {x.shape}")
        y = self.extract(x)
        if not self.uneven:
            return ops.conv2d(y, self.weight, self.bias, 1, 0, groups=self.c_in)
        y = ops.take_channels(y, self.gather)
        return ops.conv2d(y, self.weight, self.bias, 1, 0, groups=self.c_out)

    def frozen_state(self) -> dict[str, np.ndarray]:
        return dict(self.named_frozen())


def nlp_param_count(layer: NlpLayer) -> tuple[int, int]:
    """``(learnable, frozen)`` element counts."""
    learnable = sum(p.size for p in layer.parameters())
    frozen = sum(p.state_size() for p in layer.primitives)
    return learnable, frozen
