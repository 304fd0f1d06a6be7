"""Evaluation metrics and gradient-similarity diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MetricStructureError(ValueError):
    pass


@dataclass
class MetricRecord:
    """Per-task lists of ``(name, value, higher_is_better)``."""

    tasks: list = field(default_factory=list)

    @classmethod
    def from_lists(cls, tasks: Sequence[Sequence[tuple]]) -> "MetricRecord":
        return cls([[(str(n), float(v), bool(hb)) for n, v, hb in t] for t in tasks])

    def structure(self) -> list:
        return [[(n, hb) for n, _, hb in t] for t in self.tasks]

    def to_json(self) -> list:
        return [[{"name": n, "value": v, "higher_better": hb} for n, v, hb in t] for t in self.tasks]

    @classmethod
    def from_json(cls, data: list) -> "MetricRecord":
        return cls.from_lists([[(m["name"], m["value"], m["higher_better"]) for m in t]
                               for t in data])


def delta_p(method: MetricRecord, baseline: MetricRecord) -> float:
    """Average relative improvement over ``baseline``, in percent.

    Higher-is-better metrics contribute ``+(M - M_b) / M_b`` and
    lower-is-better ones ``-(M - M_b) / M_b``; terms are averaged over a task's
    metrics, then over tasks.
    """
    if method.structure() != baseline.structure():
        raise MetricStructureError("method and baseline records have different task/metric layout")
    if not method.tasks:
        raise MetricStructureError("empty metric record")
    per_task = []
    for mt, bt in zip(method.tasks, baseline.tasks):
        if not mt:
            raise MetricStructureError("task without metrics")
        terms = []
        for (name, m, hb), (_, mb, _) in zip(mt, bt):
            if mb == 0:
                raise ZeroDivisionError(f"baseline value of {name!r} is zero")
            sign = 1.0 if hb else -1.0
            terms.append(sign * (m - mb) / mb)
        per_task.append(sum(terms) / len(terms))
    return 100.0 * sum(per_task) / len(per_task)


# ---------------------------------------------------------------------------
# CKA


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two sample matrices with matching row counts."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("linear_cka expects 2-D sample matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row count mismatch: {x.shape[0]} vs {y.shape[0]}")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    if not np.any(xc) or not np.any(yc):
        return 0.0
    # CKA is scale invariant; rescaling keeps the Gram products out of under/overflow
    xc = xc / np.max(np.abs(xc))
    yc = yc / np.max(np.abs(yc))
    cross = np.linalg.norm(yc.T @ xc) ** 2
    norm_x = np.linalg.norm(xc.T @ xc)
    norm_y = np.linalg.norm(yc.T @ yc)
    return float(cross / (norm_x * norm_y))


def cka_matrix(samples: Sequence[np.ndarray]) -> np.ndarray:
    """Symmetric ``T x T`` CKA matrix with unit diagonal."""
    t = len(samples)
    out = np.eye(t)
    for i in range(t):
        for j in range(i + 1, t):
            out[i, j] = out[j, i] = linear_cka(samples[i], samples[j])
    return out


def heatmap_text(mat: np.ndarray, labels: Sequence[str] | None = None) -> str:
    """Plain-text grid with a shade character per cell, for terminal inspection."""
    shades = " .:-=+*#%@"
    t = mat.shape[0]
    labels = [str(i) for i in range(t)] if labels is None else list(labels)
    width = max(len(s) for s in labels)
    lines = [" " * width + " " + " ".join(f"{l:>6}" for l in labels)]
    for i in range(t):
        cells = []
        for j in range(t):
            v = float(np.clip(mat[i, j], 0, 1))
            cells.append(f"{v:5.3f}{shades[min(int(v * len(shades)), len(shades) - 1)]}")
        lines.append(f"{labels[i]:>{width}} " + " ".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# classification


def classification_metrics(logits: np.ndarray, labels: np.ndarray) -> dict:
    """Per-task precision/recall/F-score and accuracy for ``[N, T]`` binary tasks.

    A sample is predicted positive when ``sigmoid(logit) > 0.5``. Precision is
    0 when nothing is predicted positive and F is 0 when ``P + R = 0``. The
    macro scores are unweighted means of the per-task values.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim == 1:
        logits, labels = logits[:, None], labels[:, None]
    pred = logits > 0
    truth = labels > 0.5
    tp = np.sum(pred & truth, axis=0).astype(np.float64)
    fp = np.sum(pred & ~truth, axis=0).astype(np.float64)
    fn = np.sum(~pred & truth, axis=0).astype(np.float64)
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    recall = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
    denom = precision + recall
    f = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    accuracy = np.mean(pred == truth, axis=0)
    return {
        "precision": precision, "recall": recall, "f": f, "accuracy": accuracy,
        "macro_precision": float(precision.mean()), "macro_recall": float(recall.mean()),
        "macro_f": float(f.mean()), "macro_accuracy": float(accuracy.mean()),
    }


# ---------------------------------------------------------------------------
# dense prediction


def dense_metrics(pred_seg: np.ndarray, gt_seg: np.ndarray, pred_depth: np.ndarray,
                  gt_depth: np.ndarray) -> dict:
    """Segmentation and depth metrics.

    ``pred_seg``/``gt_seg`` are boolean masks ``[K, ...]``, one per category
    (each category is its own binary task). IoU of a category is 1 when both
    masks are empty; pixel accuracy is the per-category binary accuracy; both
    are averaged over categories.
    """
    pred_seg = np.asarray(pred_seg, dtype=bool)
    gt_seg = np.asarray(gt_seg, dtype=bool)
    if pred_seg.shape != gt_seg.shape:
        raise ValueError(f"segmentation shapes differ: {pred_seg.shape} vs {gt_seg.shape}")
    k = pred_seg.shape[0]
    p = pred_seg.reshape(k, -1)
    g = gt_seg.reshape(k, -1)
    inter = np.sum(p & g, axis=1).astype(np.float64)
    union = np.sum(p | g, axis=1).astype(np.float64)
    iou = np.divide(inter, union, out=np.ones_like(inter), where=union > 0)
    pix = np.mean(p == g, axis=1)
    out = {"iou": iou, "miou": float(iou.mean()), "pixel_acc": float(pix.mean())}
    out.update(depth_metrics(pred_depth, gt_depth))
    return out


def depth_metrics(pred_depth: np.ndarray, gt_depth: np.ndarray) -> dict:
    d = np.asarray(gt_depth, dtype=np.float64)
    dh = np.asarray(pred_depth, dtype=np.float64)
    if d.shape != dh.shape:
        raise ValueError(f"depth shapes differ: {dh.shape} vs {d.shape}")
    if np.any(d <= 0):
        raise ValueError("ground-truth depth must be positive at evaluated pixels")
    err = np.abs(d - dh)
    return {"abs_err": float(err.mean()), "rel_err": float((err / d).mean())}
