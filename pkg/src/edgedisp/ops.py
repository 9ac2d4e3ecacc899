"""Structured array operations: convolutions, pooling, resampling, softmax.

Convolutions are cross-correlations (deep-learning convention) with
zero-fill padding. Forward passes gather with strided views and contract
with einsum; input gradients go through the standard zero-stuffed
transposed formulation, so nothing here relies on slow scatter loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, accumulate_grad, make_op, needs_grad


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; names the offending axis."""


@dataclass(frozen=True)
class ConvSpec:
    """Stride / dilation / zero padding, scalar or per spatial axis."""

    stride: int | Tuple[int, ...] = 1
    dilation: int | Tuple[int, ...] = 1
    padding: int | Tuple[int, ...] = 0

    def resolved(self, nd: int) -> Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]:
        def expand(v, name, minimum):
            t = (v,) * nd if isinstance(v, int) else tuple(v)
            if len(t) != nd:
                raise ShapeError(f"{name} must have {nd} entries, got {len(t)}")
            for i, x in enumerate(t):
                if x < minimum:
                    raise ShapeError(f"{name}[{i}] = {x} is below the minimum {minimum}")
            return t

        return (expand(self.stride, "stride", 1),
                expand(self.dilation, "dilation", 1),
                expand(self.padding, "padding", 0))


def conv_out_extent(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    out = (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    if out < 1:
        raise ShapeError(
            f"output extent {out} < 1 for input {n}, kernel {k}, "
            f"stride {stride}, dilation {dilation}, pad {pad}")
    return out


# -- strided-view machinery ---------------------------------------------------


def _pad_spatial(x: np.ndarray, pad: Sequence[int]) -> np.ndarray:
    if all(p == 0 for p in pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _sliding_view(xp: np.ndarray, kernel: Sequence[int], stride: Sequence[int],
                  dilation: Sequence[int]):
    """View of shape [B, C, *kernel, *out] over the padded input."""
    nd = len(kernel)
    sp = xp.shape[2:]
    out = tuple((sp[i] - dilation[i] * (kernel[i] - 1) - 1) // stride[i] + 1
                for i in range(nd))
    shape = xp.shape[:2] + tuple(kernel) + out
    st = xp.strides
    strides = (st[:2]
               + tuple(st[2 + i] * dilation[i] for i in range(nd))
               + tuple(st[2 + i] * stride[i] for i in range(nd)))
    return np.lib.stride_tricks.as_strided(xp, shape, strides), out


_FWD_EINSUM = {2: "bcijhw,ocij->bohw", 3: "bcijkdhw,ocijk->bodhw"}
_WGT_EINSUM = {2: "bcijhw,bohw->ocij", 3: "bcijkdhw,bodhw->ocijk"}
_INP_EINSUM = {2: "boijhw,ocij->bchw", 3: "boijkdhw,ocijk->bcdhw"}


def _corr_forward(x: np.ndarray, w: np.ndarray, stride, dilation, pad) -> np.ndarray:
    nd = w.ndim - 2
    view, _ = _sliding_view(_pad_spatial(x, pad), w.shape[2:], stride, dilation)
    return np.einsum(_FWD_EINSUM[nd], view, w, optimize=True)


def _corr_weight_grad(x: np.ndarray, gy: np.ndarray, kernel, stride, dilation, pad) -> np.ndarray:
    nd = len(kernel)
    view, _ = _sliding_view(_pad_spatial(x, pad), kernel, stride, dilation)
    return np.einsum(_WGT_EINSUM[nd], view, gy, optimize=True)


def _corr_input_grad(gy: np.ndarray, w: np.ndarray, stride, dilation, pad,
                     in_spatial) -> np.ndarray:
    """Adjoint of _corr_forward w.r.t. the input (= transposed convolution)."""
    nd = w.ndim - 2
    B = gy.shape[0]
    cout = w.shape[1]
    kernel = w.shape[2:]
    # zero-stuff the cotangent by the forward stride
    up = tuple((gy.shape[2 + i] - 1) * stride[i] + 1 for i in range(nd))
    gyu = np.zeros(gy.shape[:2] + up)
    gyu[(slice(None), slice(None))
        + tuple(slice(None, None, stride[i]) for i in range(nd))] = gy
    margins = tuple(dilation[i] * (kernel[i] - 1) for i in range(nd))
    gyp = _pad_spatial(gyu, margins)
    w_flip = w[(slice(None), slice(None)) + (slice(None, None, -1),) * nd]
    view, _ = _sliding_view(gyp, kernel, (1,) * nd, dilation)
    full = np.einsum(_INP_EINSUM[nd], view, w_flip, optimize=True)
    # full[q] covers padded-input coordinate q; shift by pad and clip to the
    # requested extent (the forward floor may have ignored trailing columns).
    gx = np.zeros((B, cout) + tuple(in_spatial))
    copy = tuple(min(in_spatial[i], full.shape[2 + i] - pad[i]) for i in range(nd))
    dst = (slice(None), slice(None)) + tuple(slice(0, c) for c in copy)
    src = (slice(None), slice(None)) + tuple(
        slice(pad[i], pad[i] + copy[i]) for i in range(nd))
    gx[dst] = full[src]
    return gx


def _check_conv_shapes(x: Tensor, w: Tensor, nd: int, stride, dilation, pad) -> None:
    if x.ndim != nd + 2:
        raise ShapeError(f"input must have rank {nd + 2}, got {x.ndim}")
    if w.ndim != nd + 2:
        raise ShapeError(f"weight must have rank {nd + 2}, got {w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[1]} channels, "
            f"weight expects {w.shape[1]}")
    for i in range(nd):
        conv_out_extent(x.shape[2 + i], w.shape[2 + i], stride[i], dilation[i], pad[i])


def _convnd(x: Tensor, w: Tensor, bias: Optional[Tensor], spec: ConvSpec, nd: int) -> Tensor:
    stride, dilation, pad = spec.resolved(nd)
    _check_conv_shapes(x, w, nd, stride, dilation, pad)
    y = _corr_forward(x.data, w.data, stride, dilation, pad)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({w.shape[0]},)")
        y = y + bias.data.reshape((1, -1) + (1,) * nd)
    parents = (x, w) if bias is None else (x, w, bias)
    in_spatial = x.shape[2:]
    kernel = w.shape[2:]

    def bwd(g):
        if needs_grad(x):
            accumulate_grad(x, _corr_input_grad(g, w.data, stride, dilation, pad, in_spatial))
        if needs_grad(w):
            accumulate_grad(w, _corr_weight_grad(x.data, g, kernel, stride, dilation, pad))
        if bias is not None and needs_grad(bias):
            accumulate_grad(bias, g.sum(axis=(0,) + tuple(range(2, 2 + nd))))

    return make_op(y, parents, bwd)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlate [B,Cin,H,W] with [Cout,Cin,kh,kw]."""
    return _convnd(x, w, bias, spec, 2)


def conv3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlate [B,Cin,D,H,W] with [Cout,Cin,kd,kh,kw]."""
    return _convnd(x, w, bias, spec, 3)


def conv3d_transposed(x: Tensor, w: Tensor, spec: ConvSpec = ConvSpec(),
                      output_size: Optional[Tuple[int, int, int]] = None) -> Tensor:
    """Adjoint of conv3d; weight layout is [Cin, Cout, kd, kh, kw].

    ``output_size`` pins the spatial result (stride ambiguity); defaults to
    the minimal extent (stride*(n-1) + dilation*(k-1) + 1 - 2*pad).
    """
    nd = 3
    stride, dilation, pad = spec.resolved(nd)
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError("conv3d_transposed expects rank-5 input and weight")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"channel axis mismatch: input has {x.shape[1]} channels, "
            f"weight expects {w.shape[0]}")
    kernel = w.shape[2:]
    if output_size is None:
        output_size = tuple(
            stride[i] * (x.shape[2 + i] - 1) + dilation[i] * (kernel[i] - 1) + 1 - 2 * pad[i]
            for i in range(nd))
    for i, n in enumerate(output_size):
        if n < 1:
            raise ShapeError(f"output extent {n} < 1 on spatial axis {i}")
    y = _corr_input_grad(x.data, w.data, stride, dilation, pad, output_size)

    def bwd(g):
        if needs_grad(x):
            accumulate_grad(x, _corr_forward(g, w.data, stride, dilation, pad))
        if needs_grad(w):
            accumulate_grad(w, _corr_weight_grad(g, x.data, kernel, stride, dilation, pad))

    return make_op(y, (x, w), bwd)


# -- pooling and resampling ---------------------------------------------------


def pool_avg2d(x: Tensor, window: int | Tuple[int, int],
               stride: Optional[int | Tuple[int, int]] = None) -> Tensor:
    """Average pooling over [B,C,H,W]; stride defaults to the window."""
    win = (window, window) if isinstance(window, int) else tuple(window)
    if stride is None:
        st = win
    else:
        st = (stride, stride) if isinstance(stride, int) else tuple(stride)
    if x.ndim != 4:
        raise ShapeError(f"pool_avg2d expects rank 4, got {x.ndim}")
    for i in range(2):
        conv_out_extent(x.shape[2 + i], win[i], st[i], 1, 0)
    view, out = _sliding_view(x.data, win, st, (1, 1))
    y = view.mean(axis=(2, 3))
    inv = 1.0 / (win[0] * win[1])
    in_hw = x.shape[2:]

    def bwd(g):
        gx = np.zeros(x.shape)
        gs = g * inv
        for i in range(win[0]):
            for j in range(win[1]):
                gx[:, :,
                   i:i + (out[0] - 1) * st[0] + 1:st[0],
                   j:j + (out[1] - 1) * st[1] + 1:st[1]] += gs
        accumulate_grad(x, gx)

    _ = in_hw
    return make_op(y, (x,), bwd)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix, half-pixel centers (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    return m


def _resample_axis(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    y = np.tensordot(x, m, axes=([axis], [1]))
    return np.moveaxis(y, -1, axis)


def _upsample(x: Tensor, out_spatial: Sequence[int], first_axis: int) -> Tensor:
    mats = [_interp_matrix(x.shape[first_axis + i], n)
            for i, n in enumerate(out_spatial)]
    y = x.data
    for i, m in enumerate(mats):
        y = _resample_axis(y, m, first_axis + i)

    def bwd(g):
        gx = g
        for i, m in enumerate(mats):
            gx = _resample_axis(gx, m.T, first_axis + i)
        accumulate_grad(x, gx)

    return make_op(y, (x,), bwd)


def upsample_bilinear(x: Tensor, out_hw: Tuple[int, int]) -> Tensor:
    """Resize [B,C,H,W] to [B,C,*out_hw]."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects rank 4, got {x.ndim}")
    if min(out_hw) < 1:
        raise ShapeError(f"target extent < 1: {out_hw}")
    return _upsample(x, out_hw, 2)


def upsample_trilinear(x: Tensor, out_dhw: Tuple[int, int, int]) -> Tensor:
    """Resize [B,C,D,H,W] to [B,C,*out_dhw]."""
    if x.ndim != 5:
        raise ShapeError(f"upsample_trilinear expects rank 5, got {x.ndim}")
    if min(out_dhw) < 1:
        raise ShapeError(f"target extent < 1: {out_dhw}")
    return _upsample(x, out_dhw, 2)


# -- softmax ------------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(x, y * (g - dot))

    return make_op(y, (x,), bwd)


# -- normalization ------------------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
               running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over axis 1 of [B,C,*spatial].

    ``train`` uses batch statistics and, when running buffers are passed,
    updates them in place. ``eval`` normalizes with the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    red_axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    n = x.size // c

    if mode == "train":
        if n <= 1:
            raise ShapeError("batch statistics are degenerate: one value per channel")
        mean = x.data.mean(axis=red_axes)
        var = x.data.var(axis=red_axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval mode requires running statistics")
        mean, var = running_mean, running_var

    std = np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) / std.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bwd(g):
        gs = gamma.data.reshape(bshape) / std.reshape(bshape)
        if needs_grad(x):
            if mode == "train":
                gm = g.mean(axis=red_axes).reshape(bshape)
                gxh = (g * xhat).mean(axis=red_axes).reshape(bshape)
                accumulate_grad(x, gs * (g - gm - xhat * gxh))
            else:
                accumulate_grad(x, gs * g)
        if needs_grad(gamma):
            accumulate_grad(gamma, (g * xhat).sum(axis=red_axes))
        if needs_grad(beta):
            accumulate_grad(beta, g.sum(axis=red_axes))

    return make_op(y, (x, gamma, beta), bwd)


# -- structural ops -----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"rank mismatch in concat: {t.ndim} vs {len(ref)}")
        for ax in range(len(ref)):
            if ax != axis % len(ref) and t.shape[ax] != ref[ax]:
                raise ShapeError(
                    f"concat axis {ax} mismatch: {t.shape[ax]} vs {ref[ax]}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate_grad(t, piece)

    return make_op(y, tuple(tensors), bwd)


def pad_zero(x: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero-pad with explicit (before, after) per axis."""
    pw = tuple((int(a), int(b)) for a, b in pad_width)
    if len(pw) != x.ndim:
        raise ShapeError(f"pad_width needs {x.ndim} pairs, got {len(pw)}")
    y = np.pad(x.data, pw)
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pw, x.shape))

    def bwd(g):
        accumulate_grad(x, g[crop])

    return make_op(y, (x,), bwd)


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style penalty: 0.5*x^2 inside |x|<1, |x|-0.5 outside."""
    a = np.abs(x.data)
    inner = a < 1.0
    y = np.where(inner, 0.5 * x.data * x.data, a - 0.5)

    def bwd(g):
        accumulate_grad(x, g * np.where(inner, x.data, np.sign(x.data)))

    return make_op(y, (x,), bwd)
