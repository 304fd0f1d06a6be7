"""Multi-task training: one task active per forward pass, round-robin over tasks.

A *round* activates every task once, each on its own freshly drawn mini-batch;
an *epoch* is as many rounds as the train split has full batches, so every task
sees the whole split once per epoch in its own shuffled order.

Strategies for the shared parameters:

``steady_state``
    Adam steps the shared and the active task's parameters right after that
    task's backward pass.
``synchronized``
    Task parameters still step per task, but shared gradients are summed over
    the round and applied once at its end.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MultiTaskDataset, batch_iter, eval_batches
from .metrics import MetricRecord, classification_metrics, cka_matrix, dense_metrics
from .nets import (ArchConfig, Network, RoutedBatchNorm, build_network, count_params_flops,
                   param_owner)
from .nn import BatchNorm2d
from .optim import Adam

STRATEGIES = ("steady_state", "synchronized")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, task: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, task {task}")
        self.epoch, self.task, self.value = epoch, task, value


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    strategy: str = "steady_state"
    seed: int = 0
    task_order: str = "round_robin"
    rounds_per_epoch: Optional[int] = None  # default: full batches in the train split
    bn_recalibration_batches: int = 20  # per task, after the last epoch; 0 disables

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs: must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be positive, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr: must be positive, got {self.lr}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy: unknown strategy {self.strategy!r}")
        if self.task_order != "round_robin":
            raise ValueError(f"task_order: only 'round_robin' is supported, got {self.task_order!r}")
        if self.rounds_per_epoch is not None and self.rounds_per_epoch < 1:
            raise ValueError(f"rounds_per_epoch: must be positive, got {self.rounds_per_epoch}")
        if self.bn_recalibration_batches < 0:
            raise ValueError("bn_recalibration_batches: must be >= 0")


@dataclass
class TrainHistory:
    task_names: list
    loss: list = field(default_factory=list)  # [epoch][task]
    metric: list = field(default_factory=list)  # [epoch][task]
    seconds: list = field(default_factory=list)  # wall clock per epoch (not in CSV)
    activations: list = field(default_factory=list)  # [epoch][task] forward count

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "task", "name", "loss", "metric"])
        for e, (losses, metrics) in enumerate(zip(self.loss, self.metric)):
            for t, (l, m) in enumerate(zip(losses, metrics)):
                w.writerow([e, t, self.task_names[t], repr(l), repr(m)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# losses and per-task metrics


def task_loss(kind: str, out: Tensor, target: np.ndarray) -> Tensor:
    if kind in ("attribute", "segmentation"):
        return ops.bce_with_logits(out, target)
    if kind == "depth":
        return ops.l1_loss(out, target)
    raise ValueError(f"unknown task kind {kind!r}")


def task_metric(kind: str, outs: np.ndarray, targets: np.ndarray) -> float:
    """Headline metric of one task: F-score, IoU or absolute depth error."""
    if kind == "attribute":
        return float(classification_metrics(outs.reshape(-1, 1), targets.reshape(-1, 1))["f"][0])
    if kind == "segmentation":
        p, g = outs > 0, targets > 0.5
        union = np.sum(p | g)
        return float(np.sum(p & g) / union) if union else 1.0
    return float(np.mean(np.abs(outs - targets)))


def _batch(dataset: MultiTaskDataset, idx: np.ndarray, task: int, dtype=np.float32):
    return Tensor(dataset.images[idx].astype(dtype)), dataset.targets[task][idx].astype(dtype)


# ---------------------------------------------------------------------------
# checkpoint state


def training_state(net: Network, opt: Adam, history: TrainHistory, epoch: int) -> dict:
    state = dict(net.state_dict())
    for name in opt.params:
        state[f"adam.m.{name}"] = opt.state.m[name]
        state[f"adam.v.{name}"] = opt.state.v[name]
        state[f"adam.step.{name}"] = np.array([opt.state.steps[name]], dtype=np.float32)
    state["meta.epoch"] = np.array([epoch], dtype=np.float32)
    t = len(history.task_names)
    state["history.loss"] = np.array(history.loss, dtype=np.float32).reshape(-1, t)
    state["history.metric"] = np.array(history.metric, dtype=np.float32).reshape(-1, t)
    return state


def restore_training_state(state: dict, net: Network, opt: Adam, history: TrainHistory) -> int:
    net.load_state_dict({k: v for k, v in state.items() if k.startswith(("param.", "buffer."))})
    for name in opt.params:
        opt.state.m[name] = np.array(state[f"adam.m.{name}"])
        opt.state.v[name] = np.array(state[f"adam.v.{name}"])
        opt.state.steps[name] = int(state[f"adam.step.{name}"][0])
    history.loss = [[float(v) for v in row] for row in state["history.loss"]]
    history.metric = [[float(v) for v in row] for row in state["history.metric"]]
    history.activations = [[-1] * len(history.task_names) for _ in history.loss]
    history.seconds = [float("nan")] * len(history.loss)
    return int(state["meta.epoch"][0])


# ---------------------------------------------------------------------------
# training


def _check_compat(net: Network, dataset: MultiTaskDataset) -> None:
    if net.n_tasks != dataset.n_tasks:
        raise ValueError(f"network has {net.n_tasks} heads but dataset has {dataset.n_tasks} tasks")
    for t, (spec, head) in enumerate(zip(dataset.tasks, net.cfg.heads)):
        if spec.kind != head:
            raise ValueError(f"task {t}: dataset kind {spec.kind!r} but head kind {head!r}")


def train(net: Network, dataset: MultiTaskDataset, cfg: TrainConfig,
          checkpoint_path=None, resume_from=None, stop_after: Optional[int] = None,
          on_round=None):
    """Train ``net`` in place; returns ``(history, final training state)``.

    ``checkpoint_path`` receives the state after every epoch. ``resume_from``
    (path or state dict) continues from the epoch it records. ``stop_after``
    ends training after that many epochs in total, as an interrupted run would.
    ``on_round(epoch, round, net)`` is called after every round (diagnostics).
    """
    cfg.validate()
    _check_compat(net, dataset)
    T = net.n_tasks
    kinds = [t.kind for t in dataset.tasks]
    opt = Adam(net.named_parameters(), lr=cfg.lr)
    shared = net.shared_parameter_names()
    per_task = [net.task_parameter_names(t) for t in range(T)]
    history = TrainHistory([t.name for t in dataset.tasks])
    start = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from) if not isinstance(resume_from, dict) else resume_from
        start = restore_training_state(state, net, opt, history)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    net.train()
    for epoch in range(start, end):
        tic = time.perf_counter()
        orders = [batch_iter(dataset, cfg.batch_size, _task_seed(cfg.seed, t), "train", epoch)
                  for t in range(T)]
        n_rounds = len(orders[0]) if cfg.rounds_per_epoch is None else cfg.rounds_per_epoch
        loss_sum = np.zeros(T)
        outs = [[] for _ in range(T)]
        tgts = [[] for _ in range(T)]
        counts = [0] * T
        for r in range(n_rounds):
            acc = None
            for t in range(T):
                idx = orders[t][r % len(orders[t])]
                x, y = _batch(dataset, idx, t)
                net.zero_grad()
                out = net(x, t)
                loss = task_loss(kinds[t], out, y)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteLossError(epoch, t, value)
                backward(loss)
                counts[t] += 1
                loss_sum[t] += value
                outs[t].append(out.data)
                tgts[t].append(y)
                if cfg.strategy == "steady_state":
                    opt.step(shared + per_task[t])
                else:
                    opt.step(per_task[t])
                    acc = _accumulate(acc, opt, shared)
            if cfg.strategy == "synchronized":
                for name in shared:
                    opt.params[name].grad = acc.get(name)
                opt.step(shared)
            net.zero_grad()
            if on_round is not None:
                on_round(epoch, r, net)
        history.loss.append([float(np.float32(loss_sum[t] / n_rounds)) for t in range(T)])
        history.metric.append([float(np.float32(task_metric(kinds[t], np.concatenate(outs[t]),
                                                            np.concatenate(tgts[t]))))
                               for t in range(T)])
        history.activations.append(counts)
        if epoch + 1 == cfg.epochs and cfg.bn_recalibration_batches:
            recalibrate_bn(net, dataset, cfg.batch_size, cfg.seed, cfg.bn_recalibration_batches)
        history.seconds.append(time.perf_counter() - tic)
        state = training_state(net, opt, history, epoch + 1)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
    return history, training_state(net, opt, history, end)


def recalibrate_bn(net: Network, dataset: MultiTaskDataset, batch_size: int, seed: int,
                   batches: int) -> None:
    """Replace BN running statistics by plain averages over training batches.

    Momentum averages lag behind the weights, most for task-wise statistics
    that only update when their task is active. Each task runs ``batches``
    forward passes (no parameter updates); every statistic becomes the mean of
    the batch statistics it saw.
    """
    bns = [m for _, m in net.named_modules() if isinstance(m, (BatchNorm2d, RoutedBatchNorm))]
    saved = [m.momentum for m in bns]
    seen: dict = {}
    net.train()
    try:
        for t in range(net.n_tasks):
            order = batch_iter(dataset, batch_size, _derived_seed(seed, 104729, t), "train")
            for b in range(min(batches, len(order))):
                for m in bns:
                    key = (id(m), t if isinstance(m, RoutedBatchNorm) else None)
                    seen[key] = seen.get(key, 0) + 1
                    m.momentum = 1.0 / seen[key]
                net(Tensor(dataset.images[order[b]]), t)
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _task_seed(seed: int, task: int) -> int:
    return _derived_seed(seed, 7919, task)


def _accumulate(acc: Optional[dict], opt: Adam, names: Sequence[str]) -> dict:
    acc = {} if acc is None else acc
    for name in names:
        g = opt.params[name].grad
        if g is None:
            continue
        acc[name] = g.copy() if name not in acc else acc[name] + g
    return acc


# ---------------------------------------------------------------------------
# evaluation


def predict(net: Network, dataset: MultiTaskDataset, split: str, task: int,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    was_training = net.training
    net.eval()
    try:
        outs, tgts = [], []
        for idx in eval_batches(dataset, split, batch_size):
            x, y = _batch(dataset, idx, task)
            outs.append(net(x, task).data)
            tgts.append(y)
    finally:
        net.train(was_training)
    return np.concatenate(outs), np.concatenate(tgts)


def evaluate(net: Network, dataset: MultiTaskDataset, split: str = "test",
             batch_size: int = 64) -> dict:
    """Per-task metrics in eval mode plus the record used for relative improvement.

    Attribute tasks are scored jointly (macro precision/recall/F); the Δp record
    is one task holding macro precision and recall. Dense tasks give mean IoU
    over the segmentation categories and depth absolute error, as two tasks.
    """
    _check_compat(net, dataset)
    kinds = [t.kind for t in dataset.tasks]
    preds = [predict(net, dataset, split, t, batch_size) for t in range(dataset.n_tasks)]
    result: dict = {"split": split, "tasks": [t.name for t in dataset.tasks]}
    if all(k == "attribute" for k in kinds):
        logits = np.concatenate([p[0] for p in preds], axis=1)
        labels = np.concatenate([p[1] for p in preds], axis=1)
        cm = classification_metrics(logits, labels)
        result.update({k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in cm.items()})
        result["headline"] = cm["macro_f"]
        result["record"] = MetricRecord.from_lists(
            [[("precision", cm["macro_precision"], True), ("recall", cm["macro_recall"], True)]])
        return result
    seg = [t for t, k in enumerate(kinds) if k == "segmentation"]
    dep = [t for t, k in enumerate(kinds) if k == "depth"]
    if len(dep) != 1 or not seg or len(seg) + 1 != len(kinds):
        raise ValueError(f"unsupported task mix {kinds}")
    pred_seg = np.stack([preds[t][0][:, 0] > 0 for t in seg])
    gt_seg = np.stack([preds[t][1][:, 0] > 0.5 for t in seg])
    dm = dense_metrics(pred_seg, gt_seg, preds[dep[0]][0], preds[dep[0]][1])
    result.update({k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in dm.items()})
    result["headline"] = dm["miou"]
    result["record"] = MetricRecord.from_lists([[("miou", dm["miou"], True)],
                                                [("abs_err", dm["abs_err"], False)]])
    return result


# ---------------------------------------------------------------------------
# sweeps


def run_gamma_sweep(base: ArchConfig, dataset: MultiTaskDataset, train_cfg: TrainConfig,
                    gammas: Sequence[float], seeds: Sequence[int] = (0,),
                    split: str = "test") -> list[dict]:
    """One row per gamma: learnable parameter count and the headline metric per seed."""
    rows = []
    for g in gammas:
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"gamma {g} outside [0, 1]")
        cfg = replace(base, gamma=float(g), stage_gammas=None)
        row = {"gamma": float(g)}
        values = []
        for s in seeds:
            net = build_network(cfg, seed=s)
            row["learnable"] = count_params_flops(net)["learnable"]
            tc = replace(train_cfg, seed=s)
            train(net, dataset, tc)
            v = evaluate(net, dataset, split)["headline"]
            row[f"seed_{s}"] = v
            values.append(v)
        row["mean"] = float(np.mean(values))
        row["std"] = float(np.std(values))
        rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# gradient-correlation diagnostics


def layer_names(net: Network) -> list[str]:
    """Modules that directly own shared learnable parameters."""
    names = []
    for name, mod in net.named_modules():
        own = [n for n in mod._params if param_owner(f"{name}.{n}") is None]
        if name and own:
            names.append(name)
    return names


def _layer_params(net: Network, layer: str) -> list[tuple[str, Tensor]]:
    params = [(n, p) for n, p in net.named_parameters()
              if (n == layer or n.startswith(layer + ".")) and param_owner(n) is None]
    if not params:
        raise KeyError(f"layer {layer!r} has no shared parameters; available: "
                       + ", ".join(layer_names(net)))
    return params


def task_pair_cka(net: Network, dataset: MultiTaskDataset, layers: Sequence[str], steps: int,
                  batch_size: int = 32, seed: int = 0, split: str = "train") -> dict:
    """Per-layer ``T x T`` linear CKA between per-task shared-parameter gradients.

    At every step all tasks see the same batch; each task's gradient of the
    layer's shared parameters (flattened) is one row of that task's sample
    matrix. Parameters are not updated.
    """
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    _check_compat(net, dataset)
    params = {layer: _layer_params(net, layer) for layer in layers}
    kinds = [t.kind for t in dataset.tasks]
    order = batch_iter(dataset, batch_size, seed, split)
    rows = {layer: [[] for _ in range(net.n_tasks)] for layer in layers}
    for s in range(steps):
        idx = order[s % len(order)]
        for t in range(net.n_tasks):
            x, y = _batch(dataset, idx, t)
            net.zero_grad()
            # eval mode: BN uses running stats, so identical tasks give identical graphs
            net.eval()
            loss = task_loss(kinds[t], net(x, t), y)
            backward(loss)
            for layer in layers:
                flat = [np.zeros(p.size) if p.grad is None else p.grad.ravel()
                        for _, p in params[layer]]
                rows[layer][t].append(np.concatenate(flat).astype(np.float64))
    net.zero_grad()
    net.train()
    return {layer: cka_matrix([np.stack(r) for r in rows[layer]]) for layer in layers}


def duplicate_task(net: Network, src: int, dst: int) -> None:
    """Make task ``dst`` an exact copy of task ``src`` (heads, task branches, BN statistics)."""
    params = dict(net.named_parameters())
    for name in net.task_parameter_names(src):
        twin = name.replace(f"tasks.{src}.", f"tasks.{dst}.").replace(f"heads.{src}.",
                                                                      f"heads.{dst}.")
        params[twin].data = params[name].data.copy()
    for _, m in net.named_modules():
        if isinstance(m, RoutedBatchNorm):
            m.running_mean[dst] = m.running_mean[src]
            m.running_var[dst] = m.running_var[src]
