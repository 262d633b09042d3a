"""Differentiable ops. Conv tensors are channels-last: (B, D, H, W, C).

Each op computes its forward result with numpy and records a closure that
pushes vector-Jacobian products into its parents. conv3d builds im2col
buffers in bounded chunks and recomputes them during backward, so scratch
memory stays capped regardless of batch or window size.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_node, memory_meter

# Upper bound on transient im2col scratch per chunk.
CONV_SCRATCH_BYTES = 4 << 20

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805

PROB_CLAMP = 1e-7


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = as_tensor(b, dtype=a.dtype)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = as_tensor(b, dtype=a.dtype)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bw(g):
        a.accumulate_grad(g * s)

    return make_node(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a of shape (..., K) stacks and b a (K, M) matrix."""
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad or b._parents:
            k = a.data.shape[-1]
            m = g.shape[-1]
            b.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, m))

    return make_node(out, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return make_node(out, (a,), bw)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(g[tuple(idx)]))

    return make_node(out, tuple(tensors), bw)


def mean_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def bw(g):
        a.accumulate_grad(np.full(a.data.shape, float(g) / a.data.size, dtype=a.dtype))

    return make_node(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bw(g):
        a.accumulate_grad(np.full(a.data.shape, float(g), dtype=a.dtype))

    return make_node(out, (a,), bw)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)

    def bw(g):
        x.accumulate_grad(np.where(pos, g, g * slope))

    return make_node(out, (x,), bw)


def selu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, SELU_LAMBDA * x.data, neg)

    def bw(g):
        # on the negative branch d/dx = lambda*alpha*e^x = out + lambda*alpha
        x.accumulate_grad(np.where(pos, g * SELU_LAMBDA, g * (neg + SELU_LAMBDA * SELU_ALPHA)))

    return make_node(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        x.accumulate_grad(g * out * (1.0 - out))

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and resampling


def conv3d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation. x: (B, D, H, W, Cin); w: (k, k, k, Cin, Cout)."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv3d expects a 5-d input and a 5-d kernel")
    k = w.data.shape[0]
    if w.data.shape[:3] != (k, k, k) or w.data.shape[3] != x.data.shape[4]:
        raise ValueError(
            f"kernel shape {w.data.shape} incompatible with input shape {x.data.shape}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    b, d, h, wd, cin = x.data.shape
    cout = w.data.shape[4]
    od = (d + 2 * padding - k) // stride + 1
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    if min(od, oh, ow) < 1:
        raise ValueError("kernel larger than padded input")

    if k == 1 and stride == 1 and padding == 0:
        return matmul(x, reshape(w, (cin, cout)))

    w2d = w.data.reshape(k * k * k * cin, cout)
    rows_per_item = od * oh * ow
    cap = max(1, CONV_SCRATCH_BYTES // (k * k * k * cin * x.data.itemsize))
    d_step = max(1, min(od, cap // max(1, oh * ow)))

    def _pad(arr):
        if padding == 0:
            return arr
        p = padding
        return memory_meter.track(np.pad(arr, ((0, 0), (p, p), (p, p), (p, p), (0, 0))))

    def _col(xp, bi, d0, d1):
        # windows for output rows [d0, d1) of batch item bi
        v = sliding_window_view(xp[bi], (k, k, k), axis=(0, 1, 2))
        v = v[d0 * stride : (d1 - 1) * stride + 1 : stride, ::stride, ::stride]
        n = (d1 - d0) * oh * ow
        col = v.transpose(0, 1, 2, 4, 5, 6, 3).reshape(n, k * k * k * cin)
        return memory_meter.track(col)

    xp = _pad(x.data)
    out = memory_meter.track(np.empty((b, od, oh, ow, cout), dtype=x.data.dtype))
    for bi in range(b):
        for d0 in range(0, od, d_step):
            d1 = min(d0 + d_step, od)
            block = _col(xp, bi, d0, d1) @ w2d
            out[bi, d0:d1] = block.reshape(d1 - d0, oh, ow, cout)
    del xp

    def bw(g):
        g2 = g.reshape(b, rows_per_item, cout)
        need_dx = x.requires_grad or x._parents
        need_dw = w.requires_grad or w._parents
        xp = _pad(x.data) if need_dw else None
        dw2d = np.zeros_like(w2d) if need_dw else None
        dxp = None
        if need_dx:
            pd = d + 2 * padding
            ph = h + 2 * padding
            pw = wd + 2 * padding
            dxp = memory_meter.track(np.zeros((b, pd, ph, pw, cin), dtype=x.data.dtype))
        for bi in range(b):
            for d0 in range(0, od, d_step):
                d1 = min(d0 + d_step, od)
                rows = slice(d0 * oh * ow, d1 * oh * ow)
                gb = g2[bi, rows]
                if need_dw:
                    dw2d += _col(xp, bi, d0, d1).T @ gb
                if need_dx:
                    dcol = memory_meter.track(gb @ w2d.T).reshape(d1 - d0, oh, ow, k, k, k, cin)
                    for dz in range(k):
                        z0 = dz + d0 * stride
                        for dy in range(k):
                            for dx in range(k):
                                dxp[
                                    bi,
                                    z0 : z0 + (d1 - d0) * stride : stride,
                                    dy : dy + oh * stride : stride,
                                    dx : dx + ow * stride : stride,
                                ] += dcol[:, :, :, dz, dy, dx, :]
        if need_dw:
            w.accumulate_grad(dw2d.reshape(w.data.shape))
        if need_dx:
            if padding:
                p = padding
                dx_full = np.ascontiguousarray(dxp[:, p:-p, p:-p, p:-p, :])
            else:
                dx_full = dxp
            x.accumulate_grad(dx_full)

    return make_node(out, (x, w), bw)


def avg_pool3d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling over the three spatial axes."""
    if factor < 1:
        raise ValueError(f"pooling factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    b, d, h, w, c = x.data.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"spatial dims {(d, h, w)} not divisible by factor {factor}")
    f = factor
    od, oh, ow = d // f, h // f, w // f
    out = x.data.reshape(b, od, f, oh, f, ow, f, c).mean(axis=(2, 4, 6))

    def bw(g):
        gb = np.broadcast_to(
            g[:, :, None, :, None, :, None, :] / f**3, (b, od, f, oh, f, ow, f, c)
        )
        x.accumulate_grad(gb.reshape(b, d, h, w, c))

    return make_node(out, (x,), bw)


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """Repeat every voxel ``factor`` times along each spatial axis."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    b, d, h, w, c = x.data.shape
    f = factor
    out = np.broadcast_to(
        x.data[:, :, None, :, None, :, None, :], (b, d, f, h, f, w, f, c)
    ).reshape(b, d * f, h * f, w * f, c)

    def bw(g):
        x.accumulate_grad(g.reshape(b, d, f, h, f, w, f, c).sum(axis=(2, 4, 6)))

    return make_node(out, (x,), bw)


def _adaptive_bins(n: int, m: int):
    idx = np.arange(m + 1)
    edges = (idx * n) // m
    starts = edges[:-1]
    widths = np.diff(edges)
    if (widths < 1).any():
        raise ValueError(f"adaptive pooling target {m} exceeds input extent {n}")
    return starts, widths


def adaptive_avg_pool3d(x: Tensor, target: tuple[int, int, int]) -> Tensor:
    """Average-pool onto a fixed spatial grid with near-uniform integer bins."""
    b, d, h, w, c = x.data.shape
    plan = [_adaptive_bins(n, m) for n, m in zip((d, h, w), target)]
    out = x.data
    for axis, (starts, widths) in enumerate(plan, start=1):
        out = np.add.reduceat(out, starts, axis=axis)
        shape = [1] * out.ndim
        shape[axis] = len(widths)
        out = out / widths.reshape(shape)

    def bw(g):
        for axis, (starts, widths) in reversed(list(enumerate(plan, start=1))):
            shape = [1] * g.ndim
            shape[axis] = len(widths)
            g = np.repeat(g / widths.reshape(shape), widths, axis=axis)
        x.accumulate_grad(np.ascontiguousarray(g))

    return make_node(np.ascontiguousarray(out), (x,), bw)


def pad_right3d(x: Tensor, target: tuple[int, int, int]) -> Tensor:
    """Zero-pad the spatial axes of a (B, D, H, W, C) tensor up to ``target``."""
    b, d, h, w, c = x.data.shape
    td, th, tw = target
    if (td, th, tw) == (d, h, w):
        return x
    if td < d or th < h or tw < w:
        raise ValueError(f"target {target} smaller than input {(d, h, w)}")
    out = np.zeros((b, td, th, tw, c), dtype=x.data.dtype)
    out[:, :d, :h, :w, :] = x.data

    def bw(g):
        x.accumulate_grad(np.ascontiguousarray(g[:, :d, :h, :w, :]))

    return make_node(out, (x,), bw)


def repeat_middle(x: Tensor, n: int) -> Tensor:
    """Repeat a (B, C) tensor into (B, n, C), one copy per middle slot."""
    if n < 1:
        raise ValueError(f"repeat count must be >= 1, got {n}")
    b, c = x.data.shape
    out = np.ascontiguousarray(np.broadcast_to(x.data[:, None, :], (b, n, c)))

    def bw(g):
        x.accumulate_grad(g.sum(axis=1))

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def batch_standardize(x: Tensor, eps: float):
    """Standardize over all axes but the last (channel) axis.

    Returns (xhat, mean, var) where mean/var are plain per-channel arrays of
    the batch statistics (biased variance), for running-average upkeep.
    """
    axes = tuple(range(x.data.ndim - 1))
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        x.accumulate_grad(inv * (g - gm - xhat * gx))

    node = make_node(xhat, (x,), bw)
    return node, mean.reshape(-1), var.reshape(-1)


# ---------------------------------------------------------------------------
# losses


def _clamped(pred: Tensor):
    p = np.clip(pred.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    mask = (pred.data > PROB_CLAMP) & (pred.data < 1.0 - PROB_CLAMP)
    return p, mask


def elementwise_bce(pred_data: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-element binary cross-entropy on plain arrays (no gradient)."""
    p = np.clip(pred_data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=p.dtype)
    return -(t * np.log(p) + (1.0 - t) * np.log1p(-p))


def elementwise_focal(pred_data: np.ndarray, target: np.ndarray,
                      gamma: float = 2.0, alpha: float = 0.25) -> np.ndarray:
    """Per-element focal loss on plain arrays (no gradient)."""
    p = np.clip(pred_data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(target, dtype=p.dtype)
    p_t = t * p + (1.0 - t) * (1.0 - p)
    a_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    return -a_t * (1.0 - p_t) ** gamma * np.log(p_t)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped away from {0, 1}."""
    t = np.asarray(target, dtype=pred.dtype)
    p, mask = _clamped(pred)
    loss = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean(), dtype=pred.dtype)

    def bw(g):
        d = (p - t) / (p * (1.0 - p)) / p.size
        pred.accumulate_grad(np.where(mask, d, 0.0) * float(g))

    return make_node(loss, (pred,), bw)


def focal_loss(pred: Tensor, target, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Focal loss, mean-reduced: -alpha_t * (1 - p_t)^gamma * log(p_t)."""
    t = np.asarray(target, dtype=pred.dtype)
    p, mask = _clamped(pred)
    p_t = t * p + (1.0 - t) * (1.0 - p)
    a_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    one_m = 1.0 - p_t
    loss = np.asarray((-a_t * one_m**gamma * np.log(p_t)).mean(), dtype=pred.dtype)

    def bw(g):
        # d/dp_t of -a_t (1-p_t)^g log p_t, then chain through p_t = t*p + (1-t)(1-p).
        # The clamp keeps 1-p_t >= PROB_CLAMP, so the (gamma-1) power stays finite.
        d_pt = a_t * (gamma * one_m ** (gamma - 1.0) * np.log(p_t) - one_m**gamma / p_t)
        d = d_pt * (2.0 * t - 1.0) / p.size
        pred.accumulate_grad(np.where(mask, d, 0.0) * float(g))

    return make_node(loss, (pred,), bw)
