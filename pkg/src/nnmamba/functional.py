"""Volumetric primitives on 5-d ``[N, C, D, H, W]`` tensors.

Each function is a single tape entry with a hand-written backward rule.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, _check_finite, _record, as_tensor, transpose


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad_channels_last(x: np.ndarray, p: int) -> np.ndarray:
    n, c, d, h, w = x.shape
    out = np.zeros((n, d + 2 * p, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p : p + d, p : p + h, p : p + w] = x.transpose(0, 2, 3, 4, 1)
    return out


def _to_channels_first(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 4, 1, 2, 3))


def _conv_shifted(xd, wd, padding):
    """Stride-1 convolution as one GEMM plus shifted adds (no im2col buffer).

    On the padded channels-last grid flattened to rows, kernel tap (i, j, k)
    is a constant row offset, so every tap reads a contiguous row window.
    """
    n, c, d, h, w = xd.shape
    f, _, kd, kh, kw = wd.shape
    p = padding
    dp, hp, wp = d + 2 * p, h + 2 * p, w + 2 * p
    do, ho, wo = dp - kd + 1, hp - kh + 1, wp - kw + 1
    xflat = _pad_channels_last(xd, p).reshape(-1, c)
    rows = xflat.shape[0]
    offsets = [(i * hp + j) * wp + k for i in range(kd) for j in range(kh) for k in range(kw)]
    span = rows - offsets[-1]
    taps = len(offsets)
    # [C, taps*F], column block q holds tap q
    wall = np.ascontiguousarray(wd.transpose(1, 2, 3, 4, 0).reshape(c, taps * f))
    y = xflat @ wall
    acc = y[:span, :f].copy()
    for q in range(1, taps):
        o = offsets[q]
        acc += y[o : o + span, q * f : (q + 1) * f]
    del y
    full = np.zeros((rows, f), dtype=acc.dtype)
    full[:span] = acc
    out = _to_channels_first(full.reshape(n, dp, hp, wp, f)[:, :do, :ho, :wo])
    # per-tap [F, C] slices for the input gradient
    wtaps = np.ascontiguousarray(wd.transpose(2, 3, 4, 0, 1).reshape(taps, f, c))

    def grads(g, need_x, need_w):
        gp = np.zeros((n, dp, hp, wp, f), dtype=g.dtype)
        gp[:, :do, :ho, :wo] = g.transpose(0, 2, 3, 4, 1)
        gflat = gp.reshape(-1, f)[:span]
        gw = gx = None
        if need_w:
            gtaps = np.stack([gflat.T @ xflat[o : o + span] for o in offsets])  # [taps, F, C]
            gw = gtaps.reshape(kd, kh, kw, f, c).transpose(3, 4, 0, 1, 2)
        if need_x:
            dx = np.zeros((rows, c), dtype=g.dtype)
            for q, o in enumerate(offsets):
                dx[o : o + span] += gflat @ wtaps[q]
            dx = dx.reshape(n, dp, hp, wp, c)[:, p : p + d, p : p + h, p : p + w]
            gx = _to_channels_first(dx)
        return gx, gw

    return out, grads


def _conv_im2col(xd, wd, stride, padding):
    """Strided convolution through a channels-last ``[M, taps*C]`` im2col buffer."""
    n, c, d, h, w = xd.shape
    f, _, kd, kh, kw = wd.shape
    s, p = stride, padding
    do, ho, wo = (conv_output_size(e, k, s, p) for e, k in zip((d, h, w), (kd, kh, kw)))
    xp = _pad_channels_last(xd, p)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, : s * do : s, : s * ho : s, : s * wo : s]
    # [N, Do, Ho, Wo, C, kd, kh, kw] -> rows of (kd, kh, kw, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(n * do * ho * wo, -1)
    w2 = np.ascontiguousarray(wd.transpose(0, 2, 3, 4, 1).reshape(f, -1))
    out = _to_channels_first((cols @ w2.T).reshape(n, do, ho, wo, f))

    def grads(g, need_x, need_w):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, f)
        gw = gx = None
        if need_w:
            gw = (g2.T @ cols).reshape(f, kd, kh, kw, c).transpose(0, 4, 1, 2, 3)
        if need_x:
            dcols = (g2 @ w2).reshape(n, do, ho, wo, kd, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        dxp[:, i : i + s * do : s, j : j + s * ho : s, k : k + s * wo : s] += dcols[:, :, :, :, i, j, k]
            gx = _to_channels_first(dxp[:, p : p + d, p : p + h, p : p + w])
        return gx, gw

    return out, grads


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-d cross-correlation, ``weight`` is ``[F, C, kd, kh, kw]``.

    Output extent per axis is ``(size + 2*padding - k) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects 5-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, d, h, w = x.shape
    f, ck, kd, kh, kw = weight.shape
    if ck != c:
        raise DimensionError(f"conv3d: input has {c} channels, kernel expects {ck}")
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    for size, k in zip((d, h, w), (kd, kh, kw)):
        if k > size + 2 * padding:
            raise DimensionError(f"conv3d: kernel {weight.shape[2:]} larger than padded input {x.shape[2:]}")
    _check_finite(x.data, weight.data)
    xd = x.data
    wd = weight.data.astype(xd.dtype, copy=False)
    if stride == 1:
        out, grads = _conv_shifted(xd, wd, padding)
    else:
        out, grads = _conv_im2col(xd, wd, stride, padding)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise DimensionError(f"conv3d bias must have shape ({f},), got {bias.shape}")
        out += bias.data.reshape(1, f, 1, 1, 1)
        parents = parents + (bias,)

    def backward(g):
        gx, gw = grads(g, x.requires_grad, weight.requires_grad)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3, 4))
        return gx, gw

    return _record(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place: ``r <- (1 - momentum) * r + momentum * batch``
    (biased batch variance).
    """
    x = as_tensor(x)
    c = x.shape[1] if x.ndim >= 2 else -1
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: {x.shape[1] if x.ndim >= 2 else '?'} channels vs params {gamma.shape}")
    _check_finite(x.data)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gam = gamma.data.reshape(bshape)
    out = gam * xhat + beta.data.reshape(bshape)
    count = xd.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gam
        if training:
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _record(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def max_pool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in raster order."""
    n, c, d, h, w = x.shape
    s = int(size)
    if d % s or h % s or w % s:
        raise DimensionError(f"max_pool3d: spatial extents {x.shape[2:]} not divisible by {s}")
    blocks = x.data.reshape(n, c, d // s, s, h // s, s, w // s, s).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // s, h // s, w // s, s**3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // s, h // s, w // s, s, s, s).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(x.shape),)

    return _record(out, (x,), backward)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.stack([0.75 * a + 0.25 * prev, 0.75 * a + 0.25 * nxt], axis=-1)
    out = out.reshape(a.shape[:-1] + (2 * a.shape[-1],))
    return np.moveaxis(out, -1, axis)


def _upsample_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Trilinear x2 upsampling with half-pixel centers (``align_corners=False``)."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if x.ndim != 5:
        raise DimensionError(f"upsample_trilinear expects a 5-d tensor, got {x.shape}")
    out = x.data
    for ax in (2, 3, 4):
        out = _upsample_axis(out, ax)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        for ax in (4, 3, 2):
            g = _upsample_axis_grad(g, ax)
        return (g,)

    return _record(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=tuple(range(2, x.ndim)))


def to_tokens(x: Tensor) -> Tensor:
    """``[N, C, D, H, W]`` -> ``[N, D*H*W, C]`` in raster (D-major) order."""
    n, c = x.shape[:2]
    return transpose(x.reshape(n, c, -1), (0, 2, 1))


def from_tokens(t: Tensor, spatial) -> Tensor:
    n, _, c = t.shape
    return transpose(t, (0, 2, 1)).reshape((n, c) + tuple(spatial))
