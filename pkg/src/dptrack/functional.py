"""Differentiable ops over :class:`~dptrack.tensor.Tensor`.

Convolutions use an im2col view (``sliding_window_view``) contracted with
``tensordot``; their adjoints scatter with a fixed ``(i, j)`` loop so the
accumulation order never depends on threading. All padding is zero padding
unless an op says otherwise.
"""
from __future__ import annotations

import contextlib
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import erf

from .tensor import Tensor, as_tensor, common_dtype, make

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_kink_log: "KinkLog | None" = None
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        common_dtype([a, b])
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class KinkLog:
    """Per piecewise op call: distance of its inputs to the nearest break point and the branch taken."""

    def __init__(self):
        self.margins: list[float] = []
        self.branches: list[np.ndarray] = []

    @property
    def margin(self) -> float:
        return min(self.margins, default=float("inf"))

    def same_branches(self, other: "KinkLog") -> bool:
        return len(self.branches) == len(other.branches) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.branches, other.branches))


@contextlib.contextmanager
def kink_monitor():
    """Record every piecewise op evaluated inside the block.

    Finite differences are only meaningful when the perturbation stays inside one
    smooth piece; comparing branch records across evaluations tells whether it did.
    """
    global _kink_log
    prev, _kink_log = _kink_log, KinkLog()
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(dist: np.ndarray, branch: np.ndarray) -> None:
    if _kink_log is not None and dist.size:
        _kink_log.margins.append(float(np.min(dist)))
        _kink_log.branches.append(np.array(branch, copy=True))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    return make(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _log_kink(np.abs(a.data), a.data >= 0)
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    _log_kink(np.abs(a.data - b.data), pick_a)
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    _log_kink(np.abs(a.data - b.data), pick_a)
    return make(np.where(pick_a, a.data, b.data), (a, b),
                lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def gelu(a: Tensor) -> Tensor:
    """Exact erf GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make(out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    _log_kink(np.abs(a.data), pos)
    scale = np.where(pos, 1.0, slope).astype(a.dtype)
    return make(a.data * scale, (a,), lambda g: (g * scale,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    basic = _is_basic_index(index)
    out = np.array(a.data[index], copy=True)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    common_dtype(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make(out, tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine params must be ({d},), got {gamma.shape}, {beta.shape}")
    common_dtype([x, gamma, beta])
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(out, (x, gamma, beta), bw)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (N, H, W); updates running stats in place when training."""
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects [N,C,H,W], got {x.shape}")
    shape = (1, -1, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)
        out = (xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)).astype(x.dtype, copy=False)

        def bw_eval(g):
            scale = (gamma.data * inv).reshape(shape)
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make(out, (x, gamma, beta), bw_eval)

    if x.shape[0] < 2:
        raise ValueError("batch_norm2d in training mode needs a batch of at least 2")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * (n / (n - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data.reshape(shape)
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def _windows(xp: np.ndarray, k: int, s: int) -> np.ndarray:
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _scatter_windows(cols: np.ndarray, out: np.ndarray, k: int, s: int) -> None:
    """Adjoint of ``_windows``: cols is [N, C, Ho, Wo, k, k], accumulated into out."""
    ho, wo = cols.shape[2], cols.shape[3]
    if s == k and out.shape[2] >= ho * k and out.shape[3] >= wo * k:
        n, c = cols.shape[:2]
        out[:, :, :ho * k, :wo * k] += cols.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        return
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[:, :, :, :, i, j]


def _pad_zero(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv2d_np(x, w, stride, padding):
    k = w.shape[-1]
    cols = _windows(_pad_zero(x, padding), k, stride)
    # (kernel row, kernel col, channel) contraction order; deform_conv2d relies on it
    y = np.tensordot(cols, w, axes=([4, 5, 1], [2, 3, 1]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def _conv2d_grads(g, x_shape, w, cols, stride, padding, need_x, need_w):
    k = w.shape[-1]
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if need_w else None
    gx = None
    if need_x:
        n, c, h, wd = x_shape
        gcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
        _scatter_windows(gcols, gxp, k, stride)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
    return gx, gw


def _check_conv_args(x: Tensor, weight: Tensor, groups: int, transposed: bool) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise ValueError(f"only square kernels are supported, got {weight.shape[2]}x{weight.shape[3]}")
    c = x.shape[1]
    if c % groups:
        raise ValueError(f"input channels {c} not divisible by groups={groups}")
    wc = weight.shape[0] if transposed else weight.shape[1] * groups
    if wc != c:
        dim = "weight dim 0" if transposed else "weight dim 1 x groups"
        raise ValueError(f"channel mismatch: input has C={c} but {dim} = {wc}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation, weight [O, C/groups, k, k]."""
    _check_conv_args(x, weight, groups, transposed=False)
    k = weight.shape[-1]
    h, w = x.shape[2], x.shape[3]
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    parents = [x, weight] + ([bias] if bias is not None else [])
    common_dtype(parents)
    o = weight.shape[0]
    if o % groups:
        raise ValueError(f"output channels {o} not divisible by groups={groups}")
    cg, og = x.shape[1] // groups, o // groups
    outs, saved = [], []
    for gi in range(groups):
        y, cols = _conv2d_np(x.data[:, gi * cg:(gi + 1) * cg], weight.data[gi * og:(gi + 1) * og],
                             stride, padding)
        outs.append(y)
        saved.append(cols)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for gi in range(groups):
            gxi, gwi = _conv2d_grads(g[:, gi * og:(gi + 1) * og], (x.shape[0], cg, h, w),
                                     weight.data[gi * og:(gi + 1) * og], saved[gi], stride, padding,
                                     x.requires_grad, weight.requires_grad)
            if gx is not None:
                gx[:, gi * cg:(gi + 1) * cg] = gxi
            if gw is not None:
                gw[gi * og:(gi + 1) * og] = gwi
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make(out, parents, bw)


def _conv_transpose_np(x, w, stride, padding):
    n, _, h, wd = x.shape
    co, k = w.shape[1], w.shape[-1]
    cols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = np.zeros((n, co, (h - 1) * stride + k, (wd - 1) * stride + k), dtype=x.dtype)
    _scatter_windows(cols, full, k, stride)
    if padding:
        full = full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding]
    return np.ascontiguousarray(full)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, groups: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d`; weight [C_in, C_out/groups, k, k]; out = (H-1)*s - 2p + k."""
    _check_conv_args(x, weight, groups, transposed=True)
    k = weight.shape[-1]
    h, w = x.shape[2], x.shape[3]
    ho, wo = (h - 1) * stride - 2 * padding + k, (w - 1) * stride - 2 * padding + k
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d output would be empty ({ho}x{wo})")
    parents = [x, weight] + ([bias] if bias is not None else [])
    common_dtype(parents)
    cg = x.shape[1] // groups
    og = weight.shape[1]
    outs = [_conv_transpose_np(x.data[:, gi * cg:(gi + 1) * cg], weight.data[gi * cg:(gi + 1) * cg],
                               stride, padding) for gi in range(groups)]
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for gi in range(groups):
            gfull = _pad_zero(np.ascontiguousarray(g[:, gi * og:(gi + 1) * og]), padding)
            cols = _windows(gfull, k, stride)
            wi = weight.data[gi * cg:(gi + 1) * cg]
            if gx is not None:
                gx[:, gi * cg:(gi + 1) * cg] = np.tensordot(
                    cols, wi, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            if gw is not None:
                gw[gi * cg:(gi + 1) * cg] = np.tensordot(
                    x.data[:, gi * cg:(gi + 1) * cg], cols, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make(out, parents, bw)


def pad2d(x: Tensor, p: int, mode: str = "zero") -> Tensor:
    """Pad the last two dims by ``p`` on every side; ``mode`` is 'zero' or 'replicate'."""
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "zero":
        out = np.pad(x.data, widths)
    elif mode == "replicate":
        out = np.pad(x.data, widths, mode="edge")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    h, w = x.shape[-2], x.shape[-1]

    def bw(g):
        if mode == "zero":
            return (np.ascontiguousarray(g[..., p:p + h, p:p + w]),)
        gh = g[..., p:p + h, :].copy()
        gh[..., 0, :] += g[..., :p, :].sum(axis=-2)
        gh[..., -1, :] += g[..., p + h:, :].sum(axis=-2)
        gx = gh[..., p:p + w].copy()
        gx[..., 0] += gh[..., :p].sum(axis=-1)
        gx[..., -1] += gh[..., p + w:].sum(axis=-1)
        return (gx,)

    return make(out, (x,), bw)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------
def bilinear_gather(x: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample ``x`` [N,C,H,W] at fractional (ys, xs) [N,P]; returns [N,P,C].

    Corners outside the map read as zero. Differentiable with respect to the map
    and to both coordinate arrays. The interpolation is held as a sparse
    [N*P, N*H*W] matrix with four entries per row, so the map gradient is its
    transpose product.
    """
    if x.ndim != 4:
        raise ValueError(f"bilinear_gather expects [N,C,H,W], got {x.shape}")
    ys, xs = as_tensor(ys, like=x), as_tensor(xs, like=x)
    if ys.shape != xs.shape or ys.ndim != 2 or ys.shape[0] != x.shape[0]:
        raise ValueError(f"coordinate arrays must both be [N={x.shape[0]}, P], got {ys.shape}, {xs.shape}")
    common_dtype([x, ys, xs])
    n, c, h, w = x.shape
    p = ys.shape[1]
    rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    yd, xd = ys.data.reshape(-1), xs.data.reshape(-1)
    y0f, x0f = np.floor(yd), np.floor(xd)
    fy, fx = yd - y0f, xd - x0f
    if _kink_log is not None:
        _log_kink(np.minimum(np.minimum(fy, 1.0 - fy), np.minimum(fx, 1.0 - fx)), np.stack([y0f, x0f]))
    itype = np.int32 if n * h * w < 2 ** 31 else np.int64
    y0, x0 = y0f.astype(itype), x0f.astype(itype)
    # validity folded into the per-axis weights: an outside corner gets weight 0
    vy = ((y0 >= 0) & (y0 < h), (y0 >= -1) & (y0 < h - 1))
    vx = ((x0 >= 0) & (x0 < w), (x0 >= -1) & (x0 < w - 1))
    wy = ((1.0 - fy) * vy[0], fy * vy[1])
    wx = ((1.0 - fx) * vx[0], fx * vx[1])
    base = np.repeat(np.arange(n, dtype=itype) * (h * w), p)
    ry = (base + np.clip(y0, 0, h - 1) * w, base + np.clip(y0 + 1, 0, h - 1) * w)
    cx = (np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1))
    idx = np.empty((n * p, 4), dtype=itype)
    wts = np.empty((n * p, 4), dtype=x.dtype)
    for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        np.add(ry[dy], cx[dx], out=idx[:, k])
        np.multiply(wy[dy], wx[dx], out=wts[:, k])
    interp = sparse.csr_matrix((wts.reshape(-1), idx.reshape(-1), np.arange(0, 4 * n * p + 1, 4)),
                               shape=(n * p, n * h * w))
    out = np.asarray(interp @ rows, dtype=x.dtype).reshape(n, p, c)

    def bw(g):
        gx = gys = gxs = None
        g2 = g.reshape(n * p, c)
        if x.requires_grad:
            flat = np.asarray(interp.T @ g2, dtype=x.dtype)
            gx = np.ascontiguousarray(flat.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        if ys.requires_grad or xs.requires_grad:
            # derivative matrices share the interpolation pattern; d(weight)/dy is
            # -vy0 * wx for the upper corners and +vy1 * wx for the lower ones
            dwy = np.stack([-(vy[0] * wx[0]), -(vy[0] * wx[1]), vy[1] * wx[0], vy[1] * wx[1]], axis=1)
            dwx = np.stack([-(vx[0] * wy[0]), vx[1] * wy[0], -(vx[0] * wy[1]), vx[1] * wy[1]], axis=1)
            pattern = (interp.indices, interp.indptr)
            for coeffs, slot in ((dwy, 0), (dwx, 1)):
                deriv = sparse.csr_matrix((coeffs.reshape(-1).astype(x.dtype, copy=False),) + pattern,
                                          shape=interp.shape)
                gc = np.einsum("pc,pc->p", g2, np.asarray(deriv @ rows)).astype(x.dtype, copy=False)
                if slot == 0:
                    gys = gc.reshape(n, p)
                else:
                    gxs = gc.reshape(n, p)
        return gx, gys, gxs

    return make(out, (x, ys, xs), bw)


def bilinear_sample(feature: Tensor, point) -> Tensor:
    """Sample a single [C,H,W] map at one (y, x) point, returning [C]."""
    if feature.ndim != 3:
        raise ValueError(f"bilinear_sample expects [C,H,W], got {feature.shape}")
    py, px = point
    py = reshape(as_tensor(py, like=feature), (1, 1))
    px = reshape(as_tensor(px, like=feature), (1, 1))
    c, h, w = feature.shape
    out = bilinear_gather(reshape(feature, (1, c, h, w)), py, px)
    return reshape(out, (c,))


def deform_conv2d(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, pad-1 deformable 3x3 conv.

    ``offsets`` is [N, 2K, H, W] ordered (dy_1, dx_1, ..., dy_K, dx_K) with taps
    in row-major kernel order; ``weight`` is [O, C, 3, 3] like :func:`conv2d`.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"deform_conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ValueError(f"weight {weight.shape} incompatible with input channels {c}")
    kk = k * k
    if offsets.shape != (n, 2 * kk, h, w):
        raise ValueError(f"offsets must be {(n, 2 * kk, h, w)}, got {offsets.shape}")
    r = k // 2
    ky, kx = np.meshgrid(np.arange(k) - r, np.arange(k) - r, indexing="ij")
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base_y = (gy[:, :, None] + ky.reshape(-1)[None, None, :]).astype(x.dtype)  # [H,W,K]
    base_x = (gx[:, :, None] + kx.reshape(-1)[None, None, :]).astype(x.dtype)
    off = transpose(reshape(offsets, (n, kk, 2, h, w)), (0, 3, 4, 1, 2))  # [N,H,W,K,2]
    dy = reshape(getitem(off, (Ellipsis, 0)), (n, h * w * kk))
    dx = reshape(getitem(off, (Ellipsis, 1)), (n, h * w * kk))
    ys = add(dy, base_y.reshape(1, -1))
    xs = add(dx, base_x.reshape(1, -1))
    # (K, C) column order and a 2-D product mirror conv2d's im2col contraction,
    # so zero offsets reproduce conv2d bit for bit
    samples = reshape(bilinear_gather(x, ys, xs), (n * h * w, kk * c))
    wmat = reshape(transpose(weight, (2, 3, 1, 0)), (kk * c, o))
    y = reshape(matmul(samples, wmat), (n, h, w, o))
    y = transpose(y, (0, 3, 1, 2))
    if bias is not None:
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


# ---------------------------------------------------------------------------
# composite blocks
# ---------------------------------------------------------------------------
def mlp_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int,
                         bq=None, bk=None, bv=None, bo=None, return_weights: bool = False):
    """Self-attention over [..., N, d] tokens; weights are [d, d] in (in, out) layout."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"embed dim {d} not divisible by heads={heads}")
    dh = d // heads
    lead = x.shape[:-2]
    n = x.shape[-2]

    def split(t):
        t = reshape(t, lead + (n, heads, dh))
        nd = t.ndim
        return transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    q, k, v = split(linear(x, wq, bq)), split(linear(x, wk, bk)), split(linear(x, wv, bv))
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    attn = softmax(mul(matmul(q, kt), 1.0 / math.sqrt(dh)), axis=-1)
    ctx = matmul(attn, v)
    nd = ctx.ndim
    ctx = reshape(transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)), lead + (n, d))
    out = linear(ctx, wo, bo)
    return (out, attn) if return_weights else out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def bce_with_logits(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of ``sigmoid(logits)`` against ``target``, computed stably."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 / loss.size if reduction == "mean" else 1.0
    total = np.asarray(loss.sum() * scale, dtype=logits.dtype)

    def bw(g):
        return (g * (_sigmoid_np(z) - t) * scale,)

    return make(total, (logits,), bw)
