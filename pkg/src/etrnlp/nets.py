"""Desk-scale multi-task backbones built from interchangeable layer kinds.

``mini_resnet``: conv stem, three single-block residual stages with a 2x2
average-pool downsample before stages 2 and 3, global average pooling and one
linear logit per task.

``mini_segnet``: conv stem, three encoder stages each followed by 2x2 max
pooling (indices kept), three decoder stages each preceded by max-unpooling,
and one 1x1 convolution head per task.

Only the main-path 3x3 convolutions are swapped for the configured layer kind;
stem and residual projections are standard and shared, heads are per task.
Normalisation after an ETR layer is split like its channels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .autodiff import Tensor
from .etr import EtrModule, MaskRoutedConv, mask_routing_forward
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList, parameter
from .primitives import DEFAULT_PRIMITIVES, NlpLayer, PrimitiveSpec

LAYER_KINDS = ("conv", "nlp", "etr", "etr_nlp", "mask_routing")
ARCHS = ("mini_resnet", "mini_segnet")
HEAD_KINDS = ("attribute", "segmentation", "depth")
ROUTED_KINDS = ("etr", "etr_nlp", "mask_routing")

_OWNER = re.compile(r"(?:^|\.)(?:tasks|heads)\.(\d+)(?:\.|$)")


class ArchError(ValueError):
    pass


@dataclass
class ArchConfig:
    arch: str = "mini_resnet"
    widths: tuple = (16, 32, 64)
    layer_kind: Union[str, Sequence[str]] = "conv"
    gamma: float = 0.9
    stage_gammas: Optional[Sequence[float]] = None
    primitives: tuple = DEFAULT_PRIMITIVES
    heads: tuple = ("attribute",) * 4
    in_channels: int = 3
    image_size: int = 32

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def n_stages(self) -> int:
        return 3 if self.arch == "mini_resnet" else 6

    def stage_kinds(self) -> list[str]:
        if isinstance(self.layer_kind, str):
            return [self.layer_kind] * self.n_stages
        return list(self.layer_kind)

    def stage_gamma(self, i: int) -> float:
        return self.gamma if self.stage_gammas is None else self.stage_gammas[i]

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ArchError(f"arch: unknown architecture {self.arch!r}")
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ArchError(f"widths: need three positive stage widths, got {self.widths}")
        kinds = self.stage_kinds()
        if len(kinds) != self.n_stages:
            raise ArchError(f"layer_kind: {self.arch} has {self.n_stages} stages, got {len(kinds)}")
        for i, k in enumerate(kinds):
            if k not in LAYER_KINDS:
                raise ArchError(f"layer_kind: stage {i}: unknown kind {k!r}")
        gammas = [self.stage_gamma(i) for i in range(self.n_stages)]
        if len(gammas) != self.n_stages or not all(0.0 <= g <= 1.0 for g in gammas):
            raise ArchError(f"gamma: values must lie in [0, 1], got {gammas}")
        if not self.heads:
            raise ArchError("heads: at least one task head is required")
        for h in self.heads:
            if h not in HEAD_KINDS:
                raise ArchError(f"heads: unknown head kind {h!r}")
        if self.arch == "mini_resnet" and any(h != "attribute" for h in self.heads):
            raise ArchError("heads: mini_resnet supports attribute heads only")
        if self.arch == "mini_segnet" and "attribute" in self.heads:
            raise ArchError("heads: mini_segnet supports segmentation/depth heads only")
        if self.arch == "mini_segnet" and self.image_size % 8:
            raise ArchError(f"image_size: mini_segnet needs a multiple of 8, got {self.image_size}")
        if self.arch == "mini_resnet" and self.image_size < 4:
            raise ArchError(f"image_size: too small for two downsamples: {self.image_size}")
        for p in self.primitives:
            p.validate()


def param_owner(name: str) -> Optional[int]:
    """Task index owning a parameter, or ``None`` for shared parameters."""
    m = _OWNER.search(name)
    return None if m is None else int(m.group(1))


def make_layer(kind: str, c_in: int, c_out: int, gamma: float, n_tasks: int,
               primitives: Sequence[PrimitiveSpec], rng: np.random.Generator, seed: int,
               spatial: tuple) -> Module:
    """One stage's main-path layer, ``c_in -> c_out`` at unchanged spatial size."""
    if kind == "conv":
        return Conv2d(c_in, c_out, 3, rng)
    if kind == "nlp":
        return NlpLayer(c_in, c_out, primitives, seed=seed, rng=rng, uneven_groups=True,
                        spatial=spatial)
    if kind == "etr":
        return EtrModule(c_in, c_out, gamma, n_tasks, primitives=None, rng=rng, seed=seed)
    if kind == "etr_nlp":
        return EtrModule(c_in, c_out, gamma, n_tasks, primitives=primitives, rng=rng, seed=seed,
                         uneven_groups=True, spatial=spatial)
    if kind == "mask_routing":
        return MaskRoutedConv(c_in, c_out, gamma, n_tasks, rng,
                              mask_rng=np.random.default_rng([seed, 7]))
    raise ArchError(f"unknown layer kind {kind!r}")


class _Affine(Module):
    def __init__(self, c: int):
        super().__init__()
        self.scale = parameter(np.ones(c))
        self.shift = parameter(np.zeros(c))


class RoutedBatchNorm(Module):
    """BatchNorm with running statistics kept per task.

    The first ``c_shared`` channels have a shared affine transform, the rest one
    per task (matching an ETR split). Statistics are per task for every channel:
    once routing has made activations task dependent, a single running average
    would blend all tasks and match none of them in eval mode.
    """

    def __init__(self, c: int, c_shared: int, n_tasks: int, momentum: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.c, self.c_shared, self.n_tasks = c, c_shared, n_tasks
        self.momentum, self.eps = momentum, eps
        self.scale = parameter(np.ones(c_shared))
        self.shift = parameter(np.zeros(c_shared))
        self.tasks = ModuleList(_Affine(c - c_shared) for _ in range(n_tasks)) \
            if c > c_shared else None
        self.register_buffer("running_mean", np.zeros((n_tasks, c), dtype=np.float32))
        self.register_buffer("running_var", np.ones((n_tasks, c), dtype=np.float32))
        self.active_task = 0

    def set_task(self, task_id: int) -> None:
        if not 0 <= task_id < self.n_tasks:
            raise IndexError(f"task id {task_id} outside [0, {self.n_tasks})")
        self.active_task = task_id

    def forward(self, x: Tensor) -> Tensor:
        t = self.active_task
        scale, shift = self.scale, self.shift
        if self.tasks is not None:
            scale = ops.concat([scale, self.tasks[t].scale], axis=0)
            shift = ops.concat([shift, self.tasks[t].shift], axis=0)
        return ops.batchnorm2d(x, scale, shift, self.running_mean[t], self.running_var[t],
                               self.training, self.momentum, self.eps)


class ConvUnit(Module):
    """Swappable layer -> BatchNorm -> optional ReLU.

    Routed layers, and any layer fed by them (``stat_tasks > 1``), normalise with
    :class:`RoutedBatchNorm`; mask-routed layers normalise the shared
    convolution output before the task mask is applied.
    """

    def __init__(self, layer: Module, c_out: int, act: bool = True, stat_tasks: int = 1):
        super().__init__()
        self.layer = layer
        if isinstance(layer, EtrModule):
            self.bn = RoutedBatchNorm(c_out, layer.split.c_shared, layer.n_tasks)
        elif isinstance(layer, MaskRoutedConv):
            self.bn = RoutedBatchNorm(c_out, c_out, layer.n_tasks)
        elif stat_tasks > 1:
            self.bn = RoutedBatchNorm(c_out, c_out, stat_tasks)
        else:
            self.bn = BatchNorm2d(c_out)
        self.act = act

    def forward(self, x):
        if isinstance(self.layer, MaskRoutedConv):
            m = self.layer
            y = mask_routing_forward(m.routing, self.bn(m.conv(x)), m.active_task)
        else:
            y = self.bn(self.layer(x))
        return ops.relu(y) if self.act else y


class ResidualStage(Module):
    def __init__(self, c_in, c_out, kind, gamma, n_tasks, prims, rng, seed, spatial, downsample,
                 stat_tasks=1):
        super().__init__()
        self.downsample = downsample
        self.unit1 = ConvUnit(make_layer(kind, c_in, c_out, gamma, n_tasks, prims, rng,
                                         seed * 2 + 0, spatial), c_out, stat_tasks=stat_tasks)
        self.unit2 = ConvUnit(make_layer(kind, c_out, c_out, gamma, n_tasks, prims, rng,
                                         seed * 2 + 1, spatial), c_out, act=False,
                              stat_tasks=stat_tasks)
        self.proj = Conv2d(c_in, c_out, 1, rng, pad=0) if c_in != c_out else None

    def forward(self, x):
        if self.downsample:
            x = ops.pool2d(x, "avg", 2, 2, 0)
        skip = x if self.proj is None else self.proj(x)
        return ops.relu(ops.add(self.unit2(self.unit1(x)), skip))


class Network(Module):
    """Ordered stages plus per-task heads; ``forward_task`` runs one task end to end."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.n_tasks = cfg.n_tasks
        rng = np.random.default_rng(seed)
        frozen_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]) % (2 ** 31)
        w = list(cfg.widths)
        kinds = cfg.stage_kinds()
        size = cfg.image_size
        routed = [i for i, k in enumerate(kinds) if k in ROUTED_KINDS]
        # stages fed by routed activations keep task-wise BN statistics
        stat = [cfg.n_tasks if routed and i >= routed[0] else 1 for i in range(len(kinds))]
        self.stem = ConvUnit(Conv2d(cfg.in_channels, w[0], 3, rng), w[0])
        stages = []
        try:
            if cfg.arch == "mini_resnet":
                c = w[0]
                for i in range(3):
                    if i > 0:
                        size //= 2
                    stages.append(ResidualStage(c, w[i], kinds[i], cfg.stage_gamma(i), cfg.n_tasks,
                                                cfg.primitives, rng, frozen_seed + 10 * i,
                                                (size, size), downsample=i > 0,
                                                stat_tasks=stat[i]))
                    c = w[i]
            else:
                chans = [w[0], w[0], w[1], w[2]]
                for i in range(3):
                    stages.append(ConvUnit(make_layer(kinds[i], chans[i], chans[i + 1],
                                                      cfg.stage_gamma(i), cfg.n_tasks,
                                                      cfg.primitives, rng, frozen_seed + 10 * i,
                                                      (size, size)), chans[i + 1],
                                           stat_tasks=stat[i]))
                    size //= 2
                for j in range(3):
                    i = 3 + j
                    size *= 2
                    c_in, c_out = chans[3 - j], chans[2 - j]
                    stages.append(ConvUnit(make_layer(kinds[i], c_in, c_out, cfg.stage_gamma(i),
                                                      cfg.n_tasks, cfg.primitives, rng,
                                                      frozen_seed + 10 * i, (size, size)), c_out,
                                           stat_tasks=stat[i]))
        except (ValueError, ops.ShapeError) as exc:
            raise ArchError(f"stage {len(stages)}: {exc}") from exc
        self.stages = ModuleList(stages)
        if cfg.arch == "mini_resnet":
            self.heads = ModuleList(Linear(w[2], 1, rng) for _ in range(cfg.n_tasks))
        else:
            self.heads = ModuleList(Conv2d(w[0], 1, 1, rng, pad=0) for _ in range(cfg.n_tasks))
        self.active_task = 0

    def routed_layers(self) -> list[Module]:
        kinds = (EtrModule, MaskRoutedConv, RoutedBatchNorm)
        return [m for _, m in self.named_modules() if isinstance(m, kinds)]

    def set_task(self, task_id: int) -> None:
        if not 0 <= task_id < self.n_tasks:
            raise IndexError(f"task id {task_id} outside [0, {self.n_tasks})")
        self.active_task = task_id
        for m in self.routed_layers():
            m.set_task(task_id)

    def features(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        """Pre-head features for the active task."""
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ops.ShapeError(
                f"stem: expected [N, {self.cfg.in_channels}, H, W] input, got {x.shape}")

        def run(name, mod, inp):
            try:
                with ops.count_macs() as log:
                    out = mod(inp)
            except ops.ShapeError as exc:
                raise ops.ShapeError(f"{name}: {exc}") from exc
            if trace is not None:
                trace.append({"stage": name, "shape": list(out.shape),
                              "macs": sum(m for _, m in log)})
            return out

        h = run("stem", self.stem, x)
        if self.cfg.arch == "mini_resnet":
            for i, st in enumerate(self.stages):
                h = run(f"stage{i}", st, h)
            return h
        indices, sizes = [], []
        for i in range(3):
            h = run(f"enc{i}", self.stages[i], h)
            sizes.append(h.shape[2:])
            h, idx = ops.max_pool2d_with_indices(h, 2, 2)
            indices.append(idx)
        for j in range(3):
            h = ops.max_unpool2d(h, indices[2 - j], sizes[2 - j])
            h = run(f"dec{j}", self.stages[3 + j], h)
        return h

    def head(self, feats: Tensor, task_id: int) -> Tensor:
        if self.cfg.arch == "mini_resnet":
            return self.heads[task_id](ops.global_avg_pool(feats))
        return self.heads[task_id](feats)

    def forward(self, x: Tensor, task_id: Optional[int] = None) -> Tensor:
        return forward_task(self, x, self.active_task if task_id is None else task_id)

    # registry -----------------------------------------------------------------
    def shared_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if param_owner(n) is None]

    def task_parameter_names(self, task_id: int) -> list[str]:
        return [n for n, _ in self.named_parameters() if param_owner(n) == task_id]

    def frozen_state(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.named_frozen()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param.{n}": p.data for n, p in self.named_parameters()}
        out.update({f"buffer.{n}": b for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, arr in state.items():
            kind, _, name = key.partition(".")
            if kind == "param":
                if params[name].shape != arr.shape:
                    raise ArchError(f"{name}: checkpoint shape {arr.shape} != {params[name].shape}")
                params[name].data = np.array(arr, dtype=params[name].dtype)
            elif kind == "buffer":
                buffers[name][...] = arr


def build_network(cfg: ArchConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)


def forward_task(net: Network, batch: Tensor, task_id: int) -> Tensor:
    """Route the batch through the shared and ``task_id``'s branches; return that head's output."""
    net.set_task(task_id)
    return net.head(net.features(batch), task_id)


def count_params_flops(net: Network, input_hw: Optional[tuple] = None) -> dict:
    """Learnable/frozen element counts and MACs of one single-sample forward (task 0).

    Frozen primitive convolutions count as compute; pooling, shift and
    perturbation contribute no MACs.
    """
    hw = (net.cfg.image_size,) * 2 if input_hw is None else input_hw
    was_training = net.training
    net.eval()
    trace: list = []
    try:
        net.set_task(0)
        x = Tensor(np.zeros((1, net.cfg.in_channels, *hw), dtype=np.float32))
        with ops.count_macs() as log:
            net.head(net.features(x, trace), 0)
    finally:
        net.train(was_training)
    return {
        "learnable": sum(p.size for p in net.parameters()),
        "frozen": sum(a.size for _, a in net.named_frozen()),
        "macs": sum(m for _, m in log),
        "stages": trace,
    }


def summary_table(net: Network, input_hw: Optional[tuple] = None) -> str:
    info = count_params_flops(net, input_hw)
    params_by_stage = {}
    for name, p in net.named_parameters():
        top = name.split(".")[0]
        key = f"stage{name.split('.')[1]}" if top == "stages" else top
        params_by_stage[key] = params_by_stage.get(key, 0) + p.size
    rows = [("stage", "output", "params", "MACs")]
    for i, st in enumerate(info["stages"]):
        pkey = "stem" if st["stage"] == "stem" else f"stage{i - 1}"
        rows.append((st["stage"], "x".join(map(str, st["shape"])),
                     str(params_by_stage.get(pkey, 0)), str(st["macs"])))
    rows.append(("heads", "-", str(params_by_stage.get("heads", 0)), "-"))
    rows.append(("total", "-", str(info["learnable"]), str(info["macs"])))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) if j == 0 else c.rjust(w)
                               for j, (c, w) in enumerate(zip(r, widths))) for r in rows)
