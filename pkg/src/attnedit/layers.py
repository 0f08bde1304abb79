"""Manually differentiated array ops used by every trainable model in the package.

Each op comes as a ``*_forward`` returning ``(output, cache)`` and a matching
``*_backward`` consuming the upstream gradient plus that cache. No autodiff
framework is involved; correctness is pinned by the finite-difference checks
in the test suite.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu_forward(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(g, cache):
    x, s = cache
    return g * (s * (1.0 + x * (1.0 - s)))


def linear_forward(x, w, b):
    """x: (..., n_in) @ w: (n_in, n_out) + b."""
    return x @ w + b, (x, w)


def linear_backward(g, cache):
    x, w = cache
    gx = g @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0)
    return gx, gw, gb


def _im2col(xp, ksize, stride, ho, wo):
    b, c = xp.shape[:2]
    v = sliding_window_view(xp, (ksize, ksize), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, ho * wo, c * ksize * ksize
    )
    return cols


def conv2d_forward(x, w, b, stride=1):
    """3x3 convolution, padding 1. x: (B,C,H,W), w: (Cout,Cin,3,3), b: (Cout,)."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 - k) // stride + 1
    wo = (wd + 2 - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.reshape(cout, cin * k * k)
    y = cols @ wmat.T + b
    y = y.transpose(0, 2, 1).reshape(bsz, cout, ho, wo)
    return y, (cols, x.shape, w, stride, ho, wo)


def conv2d_backward(g, cache):
    cols, xshape, w, stride, ho, wo = cache
    bsz, cin, h, wd = xshape
    cout, _, k, _ = w.shape
    g2 = g.reshape(bsz, cout, ho * wo).transpose(0, 2, 1)
    wmat = w.reshape(cout, cin * k * k)
    gw = np.einsum("bnc,bnk->ck", g2, cols, optimize=True).reshape(w.shape)
    gb = g2.sum(axis=(0, 1))
    gcols = g2 @ wmat
    g6 = gcols.reshape(bsz, ho, wo, cin, k, k)
    gxp = np.zeros((bsz, cin, h + 2, wd + 2), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                g6[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, 1 : 1 + h, 1 : 1 + wd]
    return gx, gw, gb


def group_norm_forward(x, gamma, beta, groups, eps=1e-5):
    b, c, h, w = x.shape
    xg = x.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    xhat4 = xhat.reshape(b, c, h, w)
    y = gamma[None, :, None, None] * xhat4 + beta[None, :, None, None]
    return y, (xhat, inv, gamma, (b, c, h, w, groups))


def group_norm_backward(g, cache):
    xhat, inv, gamma, (b, c, h, w, groups) = cache
    xhat4 = xhat.reshape(b, c, h, w)
    ggamma = (g * xhat4).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    gh = (g * gamma[None, :, None, None]).reshape(b, groups, -1)
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (gh * xhat).mean(axis=-1, keepdims=True)
    gx = inv * (gh - m1 - xhat * m2)
    return gx.reshape(b, c, h, w), ggamma, gbeta


def softmax_rows(scores):
    """Row softmax over the last axis with max subtraction for stability."""
    m = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(g, probs):
    return probs * (g - (g * probs).sum(axis=-1, keepdims=True))


def upsample2_forward(x):
    """Nearest-neighbor 2x upsampling of (B,C,H,W)."""
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample2_backward(g, xshape):
    b, c, h, w = xshape
    return g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps t (scalar or (B,)) -> (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_grads_(grads: dict, max_norm: float) -> float:
    """In-place global-norm clipping; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
