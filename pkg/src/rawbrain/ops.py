"""Differentiable operations on :class:`~rawbrain.tensor.Tensor`.

Volumetric tensors use the N, C, D, H, W layout with W varying fastest.
No op broadcasts implicitly; operand shapes must match exactly.

Every reduction runs in a fixed order (sequential over kernel taps and
chunks, numpy/BLAS within a block), so repeated calls on equal inputs give
bit-identical results.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ShapeError
from .tensor import Tensor, as_tensor, record

_AXES = ("D", "H", "W")

# column matrices above this size are built one output-depth slab at a time
LOWERING_BUDGET_BYTES = 256 * 2**20


def _triple(v, what):
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"{what} needs 3 entries, got {v}")
    return v


def output_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


@dataclass(frozen=True)
class ConvParams:
    """Geometry of one 3D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid conv geometry k={self.kernel} s={self.stride} p={self.padding}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def n_params(self):
        n = int(np.prod(self.weight_shape))
        return n + (self.out_channels if self.has_bias else 0)

    def output_grid(self, grid):
        out = tuple(output_extent(n, k, s, p) for n, k, s, p in zip(grid, self.kernel, self.stride, self.padding))
        for ax, n in zip(_AXES, out):
            if n < 1:
                raise ShapeError(f"non-positive output extent on axis {ax}", axis=ax)
        return out


def _check_rank5(x, what):
    if x.ndim != 5:
        raise ShapeError(f"{what} expects an N,C,D,H,W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (plain ndarray in, ndarray out)
# ---------------------------------------------------------------------------

def _pad_cfirst(x, p):
    """(N,C,D,H,W) -> zero-padded (C,N,D+2p,H+2p,W+2p)."""
    xt = x.transpose(1, 0, 2, 3, 4)
    if any(p):
        return np.pad(xt, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    return np.ascontiguousarray(xt)


def _depth_chunks(n_rows_per_depth, n_depth, itemsize):
    per = max(1, LOWERING_BUDGET_BYTES // max(1, n_rows_per_depth * itemsize))
    return [(d, min(d + per, n_depth)) for d in range(0, n_depth, per)]


def _lowered_cols(win, d0, d1):
    C, N, _, Ho, Wo, kd, kh, kw = win.shape
    sub = win[:, :, d0:d1]
    return sub.transpose(0, 5, 6, 7, 1, 2, 3, 4).reshape(C * kd * kh * kw, N * (d1 - d0) * Ho * Wo)


def conv3d_forward(x, w, b, stride, padding, algorithm="auto"):
    """Return (output, saved) where ``saved`` feeds :func:`conv3d_backward`."""
    N, C, D, H, W = x.shape
    O, _, kd, kh, kw = w.shape
    s, p = stride, padding
    Do, Ho, Wo = (output_extent(n, k, si, pi) for n, k, si, pi in zip((D, H, W), (kd, kh, kw), s, p))
    xp = _pad_cfirst(x, p)
    algo = _pick_algorithm(algorithm, w.shape)
    out = np.empty((O, N, Do, Ho, Wo), dtype=x.dtype)
    saved_cols = None
    if algo == "lowered":
        win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, :: s[0], :: s[1], :: s[2]]
        wm = w.reshape(O, -1)
        chunks = _depth_chunks(C * kd * kh * kw * N * Ho * Wo, Do, x.itemsize)
        for d0, d1 in chunks:
            cols = _lowered_cols(win, d0, d1)
            out[:, :, d0:d1] = (wm @ cols).reshape(O, N, d1 - d0, Ho, Wo)
        if len(chunks) == 1:
            saved_cols = cols
    else:
        acc = np.zeros((O, N * Do * Ho * Wo), dtype=x.dtype)
        for a, bb, c in product(range(kd), range(kh), range(kw)):
            xs = xp[:, :, a : a + s[0] * Do : s[0], bb : bb + s[1] * Ho : s[1], c : c + s[2] * Wo : s[2]]
            acc += w[:, :, a, bb, c] @ xs.reshape(C, -1)
        out[...] = acc.reshape(O, N, Do, Ho, Wo)
    if b is not None:
        out += b.reshape(O, 1, 1, 1, 1)
    y = np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))
    return y, (xp, saved_cols, algo)


def conv3d_backward(dy, x_shape, w, saved, stride, padding, need_dx=True, need_dw=True, need_db=True):
    xp, saved_cols, algo = saved
    N, C, D, H, W = x_shape
    O, _, kd, kh, kw = w.shape
    _, _, Do, Ho, Wo = dy.shape
    s, p = stride, padding
    dyT = np.ascontiguousarray(dy.transpose(1, 0, 2, 3, 4))
    dw = np.zeros_like(w) if need_dw else None
    dxp = np.zeros_like(xp) if need_dx else None
    if algo == "lowered":
        wm = w.reshape(O, -1)
        win = None
        chunks = _depth_chunks(C * kd * kh * kw * N * Ho * Wo, Do, xp.itemsize)
        dwm = np.zeros_like(wm) if need_dw else None
        for d0, d1 in chunks:
            dyc = dyT[:, :, d0:d1].reshape(O, -1)
            if need_dw:
                if saved_cols is not None:
                    cols = saved_cols
                else:
                    if win is None:
                        win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, :: s[0], :: s[1], :: s[2]]
                    cols = _lowered_cols(win, d0, d1)
                dwm += dyc @ cols.T
            if need_dx:
                dcols = (wm.T @ dyc).reshape(C, kd, kh, kw, N, d1 - d0, Ho, Wo)
                for a, bb, c in product(range(kd), range(kh), range(kw)):
                    dxp[:, :, a + s[0] * d0 : a + s[0] * (d1 - 1) + 1 : s[0],
                        bb : bb + s[1] * Ho : s[1], c : c + s[2] * Wo : s[2]] += dcols[:, a, bb, c]
        if need_dw:
            dw = dwm.reshape(w.shape)
    else:
        dyf = dyT.reshape(O, -1)
        for a, bb, c in product(range(kd), range(kh), range(kw)):
            sl = (slice(None), slice(None), slice(a, a + s[0] * Do, s[0]),
                  slice(bb, bb + s[1] * Ho, s[1]), slice(c, c + s[2] * Wo, s[2]))
            if need_dw:
                dw[:, :, a, bb, c] = dyf @ xp[sl].reshape(C, -1).T
            if need_dx:
                dxp[sl] += (w[:, :, a, bb, c].T @ dyf).reshape(C, N, Do, Ho, Wo)
    dx = None
    if need_dx:
        dx = np.ascontiguousarray(dxp[:, :, p[0] : p[0] + D, p[1] : p[1] + H, p[2] : p[2] + W].transpose(1, 0, 2, 3, 4))
    db = dy.sum(axis=(0, 2, 3, 4)) if need_db else None
    return dx, dw, db


def _pick_algorithm(algorithm, wshape):
    if algorithm not in ("auto", "lowered", "direct"):
        raise ValueError(f"unknown conv algorithm {algorithm!r}")
    if algorithm != "auto":
        return algorithm
    return "lowered"


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def conv3d(x, weight, bias=None, stride=1, padding=0, *, params: Optional[ConvParams] = None, algorithm="auto"):
    """3D cross-correlation of an N,C,D,H,W tensor.

    ``weight`` has shape (out_c, in_c, kd, kh, kw). Geometry comes from
    ``params`` when given, otherwise from ``stride``/``padding`` and the
    weight shape.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_rank5(x, "conv3d")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5, got {weight.shape}")
    if params is None:
        params = ConvParams(weight.shape[1], weight.shape[0], weight.shape[2:], stride, padding, bias is not None)
    if weight.shape != params.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != expected {params.weight_shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {params.in_channels}", axis="C")
    if bias is not None and bias.shape != (params.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({params.out_channels},)")
    params.output_grid(x.shape[2:])
    s, p = params.stride, params.padding

    y, saved = conv3d_forward(x.data, weight.data, None if bias is None else bias.data, s, p, algorithm)

    def backward(g):
        dx, dw, db = conv3d_backward(g, x.shape, weight.data, saved, s, p,
                                     need_dx=x.requires_grad, need_dw=weight.requires_grad,
                                     need_db=bias is not None and bias.requires_grad)
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv3d", inputs, y, backward)


def maxpool3d(x, kernel=3, stride=2, padding=1):
    """Max pooling; padded positions act as -inf.

    The gradient goes to the first maximal element of each window in
    D, H, W raster order.
    """
    x = as_tensor(x)
    _check_rank5(x, "maxpool3d")
    k, s, p = _triple(kernel, "kernel"), _triple(stride, "stride"), _triple(padding, "padding")
    for ax, ki, pi in zip(_AXES, k, p):
        if pi >= ki:
            raise ShapeError(f"padding {pi} >= kernel {ki} on axis {ax}: windows without a real voxel", axis=ax)
    N, C, D, H, W = x.shape
    Do, Ho, Wo = (output_extent(n, ki, si, pi) for n, ki, si, pi in zip((D, H, W), k, s, p))
    for ax, n in zip(_AXES, (Do, Ho, Wo)):
        if n < 1:
            raise ShapeError(f"non-positive output extent on axis {ax}", axis=ax)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])), constant_values=-np.inf)
    taps = list(product(range(k[0]), range(k[1]), range(k[2])))

    def window(a, b, c):
        return (slice(None), slice(None), slice(a, a + s[0] * Do, s[0]),
                slice(b, b + s[1] * Ho, s[1]), slice(c, c + s[2] * Wo, s[2]))

    out = xp[window(*taps[0])].copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    for t, tap in enumerate(taps[1:], start=1):
        v = xp[window(*tap)]
        better = v > out
        np.copyto(out, v, where=better)
        arg[better] = t

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for t, tap in enumerate(taps):
            dxp[window(*tap)] += np.where(arg == t, g, 0)
        return (dxp[:, :, p[0] : p[0] + D, p[1] : p[1] + H, p[2] : p[2] + W],)

    return record("maxpool3d", (x,), out, backward)


def _stat_axes(x):
    if x.ndim == 5:
        return (0, 2, 3, 4), (1, -1, 1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects rank 2 or 5 input, got shape {x.shape}")


def batchnorm(x, gamma=None, beta=None, running_mean=None, running_var=None, training=True,
              momentum=0.1, eps=1e-5):
    """Batch normalization over the channel (rank 5) or feature (rank 2) axis.

    In training mode ``running_mean``/``running_var`` (ndarrays) are updated
    in place by an exponential moving average; the running variance uses the
    unbiased batch estimate. Eval mode normalizes with the running values.
    """
    x = as_tensor(x)
    axes, bshape = _stat_axes(x)
    nfeat = x.shape[1]
    gamma = as_tensor(gamma) if gamma is not None else None
    beta = as_tensor(beta) if beta is not None else None
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t is not None and t.shape != (nfeat,):
            raise ShapeError(f"{name} shape {t.shape} != ({nfeat},)")
    xd = x.data
    count = xd.size // nfeat
    if training:
        if count < 2:
            raise ShapeError("training-mode batchnorm needs at least 2 values per channel", axis="N")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (count / (count - 1))
    else:
        if running_mean is None or running_var is None:
            raise ShapeError("eval-mode batchnorm needs running statistics")
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype, copy=False)
    xhat = (xd - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma is not None and gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta is not None and beta.requires_grad else None
        dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        if training:
            sdx = dxhat.sum(axis=axes).reshape(bshape)
            sdxx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (invstd.reshape(bshape) / count) * (count * dxhat - sdx - xhat * sdxx)
        else:
            dx = dxhat * invstd.reshape(bshape)
        grads = [dx]
        if gamma is not None:
            grads.append(dgamma)
        if beta is not None:
            grads.append(dbeta)
        return grads

    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    return record("batchnorm", inputs, out, backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    y = expit(x.data)
    return record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def dense(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` with x of shape (N, F) and weight (F, M)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects rank-2 operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"inner extents differ: {x.shape[1]} vs {weight.shape[0]}", axis="F")
    y = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias.data

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", inputs, y, backward)


def dropout(x, p=0.5, training=True, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def slice_rows(x, start, stop):
    """Rows ``start:stop`` of the leading axis."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[start:stop] = g
        return (dx,)

    return record("slice_rows", (x,), x.data[start:stop], backward)


def concat(parts):
    """Concatenate tensors along the leading axis."""
    parts = [as_tensor(t) for t in parts]
    bounds = np.cumsum([0] + [len(t) for t in parts])
    out = np.concatenate([t.data for t in parts])
    return record("concat", parts, out, lambda g: tuple(g[a:b] for a, b in zip(bounds[:-1], bounds[1:])))


def flatten(x):
    """(N, ...) -> (N, prod(...))."""
    x = as_tensor(x)
    shape = x.shape
    return record("flatten", (x,), x.data.reshape(shape[0], -1), lambda g: (g.reshape(shape),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def mse_loss(pred, target):
    """Mean squared error between equally sized tensors; returns a 0-d tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.size != target.size:
        raise ShapeError(f"pred has {pred.size} values, target has {target.size}")
    n = pred.size
    if n == 0:
        raise ShapeError("mse_loss of an empty batch")
    diff = pred.data.reshape(-1) - target.data.reshape(-1).astype(pred.dtype, copy=False)
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g):
        d = (2.0 / n) * g * diff
        return d.reshape(pred.shape), (-d).reshape(target.shape)

    return record("mse_loss", (pred, target), loss, backward)


def weighted_sum(x, weights):
    """Scalar sum(x * weights) with a constant weight array."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} != {x.shape}")
    return record("weighted_sum", (x,), np.asarray(np.sum(x.data * w)), lambda g: (g * w,))
