"""Differentiable operations on :class:`~etrnlp.autodiff.Tensor`.

Every op computes in the dtype of its inputs, so float32 networks run in
float32 and the gradient checker can replay the same graph in float64.
Convolution and pooling use im2col-style window views; reductions are plain
numpy calls with a fixed order, so results are bit-reproducible on one machine.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    """Dimension or divisibility mismatch between operands."""


class DegenerateOutputError(ValueError):
    """The requested window/stride/padding leaves no output positions."""


# ---------------------------------------------------------------------------
# multiply-accumulate accounting

_mac_counters: list = []


@contextmanager
def count_macs():
    """Collect multiply-accumulate counts of conv-like ops run inside the block.

    Yields a list that receives ``(op, macs)`` tuples.
    """
    log: list = []
    _mac_counters.append(log)
    try:
        yield log
    finally:
        _mac_counters.pop()


def _record_macs(op: str, macs: int) -> None:
    for log in _mac_counters:
        log.append((op, int(macs)))


# ---------------------------------------------------------------------------
# elementwise / structural


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), bw, "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    # maximum (not where) so NaNs propagate instead of turning into zeros
    return make_result(np.maximum(x.data, 0).astype(x.dtype), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def bw(g):
        return (g * y * (1 - y),)

    return make_result(y, (x,), bw, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z)))).astype(z.dtype)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def take_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather channels ``x[:, index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)

    order = np.argsort(index, kind="stable")
    uniq, starts = np.unique(index[order], return_index=True)
    unique = uniq.size == index.size
    ordered = bool(np.all(order == np.arange(index.size)))

    def bw(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[:, index] = g
        else:
            gx[:, uniq] = np.add.reduceat(g if ordered else g[:, order], starts, axis=1)
        return (gx,)

    return make_result(x.data[:, index], (x,), bw, "take_channels")


def permute_channels(x: Tensor, perm: np.ndarray) -> Tensor:
    """Output channel ``i`` is input channel ``perm[i]``; ``perm`` must be a bijection."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)

    def bw(g):
        return (g[:, inv],)

    return make_result(x.data[:, perm], (x,), bw, "permute_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``[N, C, H, W] -> [N, C]``."""
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for ``x: [N, D]``, ``w: [O, D]``."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight columns {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    _record_macs("linear", w.shape[0] * w.shape[1])
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, inputs, bw, "linear")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _pad_hw(a: np.ndarray, pad: int, value=0.0) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape ``[N, C, Ho, Wo, kh, kw]`` over a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _tap(a: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Input positions touched by kernel tap ``(i, j)``: ``a[..., i + s*y, j + s*x]``."""
    return a[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _col2im(dwin: np.ndarray, padded_shape: tuple, stride: int, pad: int) -> np.ndarray:
    """Scatter-add tap gradients ``[kh, kw, N, C, Ho, Wo]`` back onto the (unpadded) input."""
    kh, kw, n, c, ho, wo = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, stride, ho, wo)[...] += dwin[i, j]
    return _crop(dxp, pad)


def _crop(a: np.ndarray, pad: int) -> np.ndarray:
    return a[:, :, pad:-pad, pad:-pad] if pad else a


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with grouped channels.

    ``w`` has shape ``[C_out, C_in // groups, kh, kw]``. Pointwise and
    depthwise cases take dedicated paths that avoid materialising im2col
    columns; all paths agree with the loop oracle in the tests.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or pad={pad}")
    n, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise ShapeError(f"conv2d: weight expects {cg * groups} input channels, input has {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DegenerateOutputError(f"conv2d: output {ho}x{wo} from input {h}x{wd}, kernel {kh}x{kw}")
    _record_macs("conv2d", c_out * cg * kh * kw * ho * wo)

    if kh == kw == 1 and stride == 1 and pad == 0:
        out, core_bw = _conv_pointwise(x, w, groups)
    elif cg == 1 and groups == c_in:
        out, core_bw = _conv_depthwise(x, w, stride, pad, ho, wo)
    else:
        out, core_bw = _conv_im2col(x, w, stride, pad, groups, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx, gw = core_bw(g)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, bw, "conv2d")


def _conv_pointwise(x: Tensor, w: Tensor, groups: int):
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    cg, og = c_in // groups, c_out // groups
    xg = x.data.reshape(n, groups, cg, h * wd)
    wm = w.data.reshape(groups, og, cg)
    out = np.matmul(wm, xg).reshape(n, c_out, h, wd)

    def bw(g):
        gg = g.reshape(n, groups, og, h * wd)
        gx = np.matmul(wm.transpose(0, 2, 1), gg).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            lhs = gg.transpose(1, 2, 0, 3).reshape(groups, og, n * h * wd)
            rhs = xg.transpose(1, 0, 3, 2).reshape(groups, n * h * wd, cg)
            gw = np.matmul(lhs, rhs).reshape(w.shape)
        return gx, gw

    return out, bw


def _conv_depthwise(x: Tensor, w: Tensor, stride: int, pad: int, ho: int, wo: int):
    n, c, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    mult = c_out // c
    xp = _pad_hw(x.data, pad)
    if mult > 1:
        xp = np.repeat(xp, mult, axis=1)
    wk = w.data[:, 0]  # [C_out, kh, kw]
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wk[None, :, i, j, None, None] * _tap(xp, i, j, stride, ho, wo)

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, _tap(xp, i, j, stride, ho, wo))
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    _tap(dxp, i, j, stride, ho, wo)[...] += wk[None, :, i, j, None, None] * g
            if mult > 1:
                dxp = dxp.reshape(n, c, mult, *dxp.shape[2:]).sum(axis=2)
            gx = _crop(dxp, pad)
        return gx, gw

    return out, bw


def _conv_im2col(x: Tensor, w: Tensor, stride: int, pad: int, groups: int, ho: int, wo: int):
    n, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    og = c_out // groups
    kk = cg * kh * kw
    nl = n * ho * wo
    xp = _pad_hw(x.data, pad)
    win = _windows(xp, kh, kw, stride, ho, wo)  # N C Ho Wo kh kw
    # columns [G, K, N*L]; K ordered (cg, kh, kw) to match the weight layout
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(groups, kk, nl)
    wmat = w.data.reshape(groups, og, kk)
    out = np.matmul(wmat, cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def bw(g):
        gg = g.transpose(1, 0, 2, 3).reshape(groups, og, nl)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(gg, cols.transpose(0, 2, 1)).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gg).reshape(c_in, kh, kw, n, ho, wo)
            dxp = np.zeros((c_in, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    _tap(dxp, i, j, stride, ho, wo)[...] += dcols[:, i, j]
            gx = np.ascontiguousarray(_crop(dxp, pad).transpose(1, 0, 2, 3))
        return gx, gw

    return out, bw


# ---------------------------------------------------------------------------
# pooling


def pool2d(x: Tensor, kind: str, k: int, stride: Optional[int] = None, pad: int = 0) -> Tensor:
    """Average or max pooling.

    Average pooling counts zero padding in the window (divisor ``k*k``); max
    pooling pads with ``-inf`` and routes gradient to the first maximum in
    row-major window order.
    """
    out, _ = _pool(x, kind, k, stride, pad, want_indices=False)
    return out


def max_pool2d_with_indices(x: Tensor, k: int, stride: Optional[int] = None, pad: int = 0):
    """Max pooling that also returns flat ``h*W + w`` positions of each maximum."""
    return _pool(x, "max", k, stride, pad, want_indices=True)


def _pool(x: Tensor, kind: str, k: int, stride: Optional[int], pad: int, want_indices: bool):
    if kind not in ("avg", "max"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    stride = k if stride is None else stride
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"pool2d: invalid k={k}, stride={stride}, pad={pad}")
    n, c, h, wd = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise DegenerateOutputError(f"pool2d: window {k} exceeds padded input {h}x{wd}")

    if kind == "avg":
        # separable box sum: k row taps, then k column taps
        xp = _pad_hw(x.data, pad)
        hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        rows = np.zeros((n, c, ho, xp.shape[3]), dtype=x.dtype)
        for i in range(k):
            rows += xp[:, :, i:i + hspan:stride, :]
        acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for j in range(k):
            acc += rows[:, :, :, j:j + wspan:stride]
        out = acc / x.dtype.type(k * k)

        def bw(g):
            gs = g / g.dtype.type(k * k)
            drows = np.zeros(rows.shape, dtype=g.dtype)
            for j in range(k):
                drows[:, :, :, j:j + wspan:stride] += gs
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                dxp[:, :, i:i + hspan:stride, :] += drows
            return (_crop(dxp, pad),)

        return make_result(out, (x,), bw, "avg_pool2d"), None

    xp = _pad_hw(x.data, pad, -np.inf)
    # running max over taps in row-major order; strict ">" keeps the first maximum
    out = _tap(xp, 0, 0, stride, ho, wo).copy()
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for t in range(1, k * k):
        i, j = divmod(t, k)
        v = _tap(xp, i, j, stride, ho, wo)
        better = v > out
        out[better] = v[better]
        arg[better] = t
    out = out.astype(x.dtype)

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            _tap(dxp, i, j, stride, ho, wo)[...] += np.where(arg == t, g, 0)
        return (_crop(dxp, pad),)

    indices = None
    if want_indices:
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[:, None] * stride + di - pad
        cols = np.arange(wo)[None, :] * stride + dj - pad
        indices = rows * wd + cols
    return make_result(out, (x,), bw, "max_pool2d"), indices


def max_unpool2d(x: Tensor, indices: np.ndarray, output_hw: tuple) -> Tensor:
    """Place each value at its recorded flat position; every other position is zero."""
    n, c, h, w = x.shape
    oh, ow = output_hw
    if indices.shape != x.shape:
        raise ShapeError(f"max_unpool2d: indices {indices.shape} != input {x.shape}")
    flat_idx = indices.reshape(n, c, -1)
    out = np.zeros((n, c, oh * ow), dtype=x.dtype)
    np.put_along_axis(out, flat_idx, x.data.reshape(n, c, -1), axis=-1)

    def bw(g):
        return (np.take_along_axis(g.reshape(n, c, -1), flat_idx, axis=-1).reshape(x.shape),)

    return make_result(out.reshape(n, c, oh, ow), (x,), bw, "max_unpool2d")


# ---------------------------------------------------------------------------
# normalisation


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the running statistics are updated in place using the
    unbiased batch variance; evaluation mode normalises with them instead.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batchnorm2d: expected scale/shift of length {c}")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * m / max(m - 1, 1)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bw(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None, None]
            if training:
                m = x.size // c
                gx = (inv[None, :, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gscale, gshift

    return make_result(out.astype(x.dtype), (x, scale, shift), bw, "batchnorm2d")


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} != logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bw(g):
        return ((g / n) * (_sigmoid(z) - y),)

    return make_result(np.asarray(loss.mean(), dtype=logits.dtype), (logits,), bw, "bce")


def l1_loss(pred: Tensor, targets) -> Tensor:
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"l1_loss: targets {y.shape} != prediction {pred.shape}")
    diff = pred.data - y
    n = diff.size

    def bw(g):
        return ((g / n) * np.sign(diff),)

    return make_result(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,), bw, "l1")
