"""Explicit task routing: a shared branch plus one exclusive branch per task.

The module's output channels are split by the sharing ratio ``gamma``: the first
``floor(gamma * C_out)`` come from the shared branch (an :class:`NlpLayer`, or a
plain 3x3 convolution when NLP is disabled) and the rest from the active task's
own 3x3 convolution. Only the active task's branch enters the graph, so other
tasks' parameters get no gradient at all.

:class:`MaskRoutedConv` is the random-mask routing baseline: one shared
convolution whose output channels are multiplied by a fixed per-task binary mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tensor
from .nn import Conv2d, Module, ModuleList
from .primitives import DEFAULT_PRIMITIVES, NlpLayer, PrimitiveSpec, nlp_param_count


class TaskIdError(IndexError):
    pass


@dataclass(frozen=True)
class ChannelSplit:
    c_out: int
    gamma: float
    c_shared: int
    c_specific: int


def split_channels(c_out: int, gamma: float) -> ChannelSplit:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if c_out < 1:
        raise ValueError(f"C_out must be positive, got {c_out}")
    # gamma is read as the decimal it prints as, so 0.29 * 100 gives 29 rather
    # than the 28 that binary floating point would produce
    c_shared = math.floor(Fraction(repr(float(gamma))) * c_out)
    return ChannelSplit(c_out, gamma, c_shared, c_out - c_shared)


def _check_task(task_id: int, n_tasks: int) -> None:
    if not 0 <= task_id < n_tasks:
        raise TaskIdError(f"task id {task_id} outside [0, {n_tasks})")


class EtrModule(Module):
    """Shared branch + ``T`` task-specific branches, concatenated along channels.

    Args:
        c_in, c_out: channel counts.
        gamma: sharing ratio.
        n_tasks: number of tasks ``T``.
        primitives: primitive set of the shared NLP branch; ``None`` gives a
            plain learnable 3x3 shared convolution (ETR without NLP).
        rng: initialiser for learnable weights.
        seed: seed of the frozen primitive state.
        uneven_groups: forwarded to :class:`NlpLayer`.
        spatial: input size used to materialise perturbation masks eagerly.
    """

    def __init__(self, c_in: int, c_out: int, gamma: float, n_tasks: int,
                 primitives: Optional[Sequence[PrimitiveSpec]] = DEFAULT_PRIMITIVES,
                 rng: Optional[np.random.Generator] = None, seed: int = 0,
                 uneven_groups: bool = False, spatial: Optional[tuple] = None):
        super().__init__()
        if n_tasks < 1:
            raise ValueError(f"need at least one task, got {n_tasks}")
        rng = np.random.default_rng(seed) if rng is None else rng
        self.split = split_channels(c_out, gamma)
        self.c_in, self.c_out, self.n_tasks = c_in, c_out, n_tasks
        self.use_nlp = primitives is not None
        self.active_task = 0
        self.shared = None
        if self.split.c_shared:
            if self.use_nlp:
                self.shared = NlpLayer(c_in, self.split.c_shared, primitives, seed=seed, rng=rng,
                                       uneven_groups=uneven_groups, spatial=spatial)
            else:
                self.shared = Conv2d(c_in, self.split.c_shared, 3, rng)
        self.tasks = None
        if self.split.c_specific:
            self.tasks = ModuleList(Conv2d(c_in, self.split.c_specific, 3, rng)
                                    for _ in range(n_tasks))

    def set_task(self, task_id: int) -> None:
        _check_task(task_id, self.n_tasks)
        self.active_task = task_id

    def task_branch(self, task_id: int) -> Optional[Conv2d]:
        _check_task(task_id, self.n_tasks)
        return None if self.tasks is None else self.tasks[task_id]

    def forward(self, x: Tensor, task_id: Optional[int] = None) -> Tensor:
        if task_id is not None:
            self.set_task(task_id)
        parts = []
        if self.shared is not None:
            parts.append(self.shared(x))
        if self.tasks is not None:
            parts.append(self.tasks[self.active_task](x))
        return ops.concat(parts, axis=1)


def etr_forward(m: EtrModule, x: Tensor, task_id: int) -> Tensor:
    return m(x, task_id)


def grad_isolation_check(m: EtrModule, task_id: int) -> dict:
    """L-inf gradient norms per task branch and for the shared branch.

    A branch that never entered the tape has ``grad is None`` and reports 0.0.
    ``ok`` is true when every inactive branch is exactly zero.
    """
    _check_task(task_id, m.n_tasks)
    report = {"active": task_id, "branches": {}, "shared": 0.0}

    def linf(mod):
        norms = [float(np.max(np.abs(p.grad))) for p in mod.parameters()
                 if p.grad is not None and p.grad.size]
        return max(norms, default=0.0)

    if m.shared is not None:
        report["shared"] = linf(m.shared)
    if m.tasks is not None:
        for j, branch in enumerate(m.tasks):
            report["branches"][j] = linf(branch)
    report["ok"] = all(v == 0.0 for j, v in report["branches"].items() if j != task_id)
    return report


def etr_param_count(m: EtrModule) -> dict:
    shared = 0
    if m.shared is not None:
        shared = nlp_param_count(m.shared)[0] if m.use_nlp else sum(
            p.size for p in m.shared.parameters())
    per_task = 0 if m.tasks is None else sum(p.size for p in m.tasks[0].parameters())
    return {"shared": shared, "per_task": per_task, "total": shared + m.n_tasks * per_task}


def sample_task_masks(c_out: int, gamma: float, n_tasks: int, rng: np.random.Generator) -> np.ndarray:
    """``[T, C_out]`` binary masks, each with exactly ``floor(gamma * C_out)`` ones."""
    keep = split_channels(c_out, gamma).c_shared
    masks = np.zeros((n_tasks, c_out), dtype=np.float32)
    for t in range(n_tasks):
        masks[t, rng.permutation(c_out)[:keep]] = 1.0
    return masks


class MaskRouting:
    """Fixed random per-task channel masks over a shared layer's outputs."""

    def __init__(self, c_out: int, gamma: float, n_tasks: int, rng: np.random.Generator):
        self.c_out, self.gamma, self.n_tasks = c_out, gamma, n_tasks
        self.masks = sample_task_masks(c_out, gamma, n_tasks, rng)
        self.masks.setflags(write=False)


def mask_routing_forward(r: MaskRouting, conv_out: Tensor, task_id: int) -> Tensor:
    _check_task(task_id, r.n_tasks)
    if conv_out.shape[1] != r.c_out:
        raise ops.ShapeError(f"mask routing: expected {r.c_out} channels, got {conv_out.shape[1]}")
    mask = r.masks[task_id].astype(conv_out.dtype)[None, :, None, None]
    return ops.mul(conv_out, Tensor(mask))


class MaskRoutedConv(Module):
    """Shared 3x3 convolution followed by the active task's channel mask."""

    def __init__(self, c_in: int, c_out: int, gamma: float, n_tasks: int,
                 rng: np.random.Generator, mask_rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.routing = MaskRouting(c_out, gamma, n_tasks, rng if mask_rng is None else mask_rng)
        self.register_frozen("masks", self.routing.masks)
        self.n_tasks = n_tasks
        self.active_task = 0

    def set_task(self, task_id: int) -> None:
        _check_task(task_id, self.n_tasks)
        self.active_task = task_id

    def _cast_extra(self, dtype):
        self.routing.masks = self._frozen["masks"]

    def forward(self, x: Tensor, task_id: Optional[int] = None) -> Tensor:
        if task_id is not None:
            self.set_task(task_id)
        return mask_routing_forward(self.routing, self.conv(x), self.active_task)
