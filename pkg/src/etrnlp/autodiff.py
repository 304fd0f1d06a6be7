"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`etrnlp.ops` build a
graph of :class:`Node` objects whenever at least one input requires a
gradient; :func:`backward` linearises that graph into a :class:`Tape` and walks
it once in reverse.

Tensors that do not require gradients (frozen primitive state, data, masks)
never become leaves, but gradients still flow *through* operations applied to
them towards earlier nodes that do.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class AutodiffError(RuntimeError):
    """Raised for misuse of the differentiation machinery."""


class Node:
    """One recorded operation: its inputs and a rule mapping dL/dout to dL/dinputs."""

    __slots__ = ("inputs", "backward_fn", "op")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, op: str):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """A numpy-backed array with an optional gradient slot.

    Networks use rank-4 NCHW tensors, but the engine itself is rank-agnostic so
    that linear heads and scalar losses share the same machinery.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> "Tape":
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable,
                op: str) -> Tensor:
    """Wrap ``data`` and record a node if any input participates in differentiation."""
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn, op)
    return out


@dataclass
class Tape:
    """Topologically ordered record of the operations behind one scalar."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def build_tape(loss: Tensor) -> Tape:
    """Linearise the graph rooted at ``loss`` (iterative DFS, inputs before users)."""
    tape = Tape()
    seen_nodes: set[int] = set()
    seen_leaves: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if t.node is None:
            if t.requires_grad and id(t) not in seen_leaves:
                seen_leaves.add(id(t))
                tape.leaves.append(t)
            continue
        if expanded:
            tape.nodes.append(t.node)
            tape.outputs.append(t)
            continue
        if id(t) in seen_nodes:
            continue
        seen_nodes.add(id(t))
        stack.append((t, True))
        for inp in reversed(t.node.inputs):
            if inp.requires_grad and (inp.node is None or id(inp) not in seen_nodes):
                stack.append((inp, False))
    return tape


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto existing ``.grad`` arrays so callers can sum over
    several backward passes; clear them with ``zero_grad`` between steps.
    """
    if loss.data.size != 1 and grad is None:
        raise AutodiffError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("backward() on a tensor with an empty tape")
    tape = build_tape(loss)
    if not tape.nodes:
        # loss is itself a leaf
        seed = np.ones_like(loss.data) if grad is None else grad
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return tape

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.dtype)
    }
    for out, node in zip(reversed(tape.outputs), reversed(tape.nodes)):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise AutodiffError(
                    f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
            if inp.node is None:
                g = g.astype(inp.dtype, copy=False)
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else prev + g
    return tape
