"""Numeric kernels built on top of :mod:`dvhgnn.tensor`.

Spatial tensors are laid out (H, W, D): rows, columns, channels.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .tensor import (
    Tensor,
    _result,
    add,
    as_tensor,
    clip,
    div,
    gelu,
    matmul,
    maximum,
    mul,
    reduce_mean,
    reduce_sum,
    sigmoid,
    sqrt,
    square,
    sub,
)

COSINE_EPS = 1e-12

__all__ = [
    "COSINE_EPS",
    "avg_pool_region",
    "conv2d",
    "cosine_similarity",
    "cosine_matrix",
    "depthwise_conv3x3",
    "gelu",
    "layer_norm",
    "linear",
    "sigmoid",
]


def depthwise_conv3x3(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3x3 correlation with one cell of zero padding.

    The nine taps are accumulated in a fixed row-major order so the result
    does not depend on scheduling.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3:
        raise ValueError(f"depthwise_conv3x3 expects (H, W, D), got {x.shape}")
    h, w, d = x.shape
    if kernel.shape != (3, 3, d):
        raise ValueError(f"kernel shape {kernel.shape} does not match (3, 3, {d})")
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    k = kernel.data
    out = np.zeros((h, w, d))
    for di in range(3):
        for dj in range(3):
            out += xp[di:di + h, dj:dj + w] * k[di, dj]

    def backward(g):
        gp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for di in range(3):
            for dj in range(3):
                gp[di:di + h, dj:dj + w] += g * k[di, dj]
                gk[di, dj] = np.sum(g * xp[di:di + h, dj:dj + w], axis=(0, 1))
        return gp[1:-1, 1:-1], gk

    return _result("depthwise_conv3x3", out, (x, kernel), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Dense 3x3 convolution (pad 1) via im2col; weight is (3, 3, Cin, Cout)."""
    x, weight = as_tensor(x), as_tensor(weight)
    h, w, cin = x.shape
    k = weight.shape[0]
    if weight.shape[:3] != (k, k, cin):
        raise ValueError(f"conv weight {weight.shape} incompatible with input {x.shape}")
    cout = weight.shape[3]
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((ho, wo, k, k, cin))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    cols2 = cols.reshape(ho * wo, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols2 @ wmat).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        gw = (cols2.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
        gp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gp[di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, :, di, dj]
        return gp[pad:pad + h, pad:pad + w], gw

    y = _result("conv2d", out, (x, weight), backward)
    return y if bias is None else add(y, bias)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (Din, Dout)."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        y = add(y, bias)
    return y.reshape(*lead, y.shape[-1])


def avg_pool_region(x: Tensor, rect: Tuple[int, int, int, int]) -> Tensor:
    """Mean over rows r0:r1 and columns c0:c1 (half-open), per channel."""
    r0, r1, c0, c1 = rect
    h, w = x.shape[:2]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"empty or out-of-bounds rectangle {rect} for a {h}x{w} field")
    return reduce_mean(x[r0:r1, c0:c1], axis=(0, 1))


def _safe_norm(x: Tensor, axis: int, eps: float) -> Tensor:
    # sqrt(max(|x|^2, eps^2)) == max(|x|, eps) but keeps a finite derivative at 0
    return sqrt(maximum(reduce_sum(square(x), axis=axis, keepdims=True), eps * eps))


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dot = reduce_sum(mul(a, b))
    den = mul(_safe_norm(a, -1, eps), _safe_norm(b, -1, eps)).reshape(())
    return clip(div(dot, den), -1.0, 1.0)


def cosine_matrix(c: Tensor, x: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Pairwise cosine similarity of rows: (..., C, D) x (..., N, D) -> (..., C, N)."""
    num = matmul(c, _swap_last(x))
    nc = _safe_norm(c, -1, eps)
    nx = _swap_last(_safe_norm(x, -1, eps))
    return clip(div(num, mul(nc, nx)), -1.0, 1.0)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the channel (last) axis."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(square(xc), axis=-1, keepdims=True)
    y = div(xc, sqrt(add(var, eps)))
    return add(mul(y, weight), bias)
