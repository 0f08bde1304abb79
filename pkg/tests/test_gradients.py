"""Finite-difference verification of every hand-written backward pass."""

import numpy as np
import pytest

from attnedit.attention import attention_backward, attention_forward
from attnedit.layers import (
    conv2d_backward,
    conv2d_forward,
    group_norm_backward,
    group_norm_forward,
    silu_backward,
    silu_forward,
)
from attnedit.net import EpsilonNet


def rel_err(fd, an, floor=1e-7):
    # absolute floor: structurally-zero gradients sit at the FD noise level
    if abs(fd - an) < floor:
        return 0.0
    return abs(fd - an) / max(abs(fd), abs(an))


def central_diff(f, arr, idx, h=1e-6):
    orig = arr[idx]
    arr[idx] = orig + h
    lp = f()
    arr[idx] = orig - h
    lm = f()
    arr[idx] = orig
    return (lp - lm) / (2 * h)


def probe_params(f, params, grads, rng, n_probes, tol=1e-3):
    names = sorted(params)
    worst = 0.0
    for _ in range(n_probes):
        name = names[rng.integers(len(names))]
        arr = params[name]
        idx = tuple(rng.integers(s) for s in arr.shape)
        fd = central_diff(f, arr, idx)
        worst = max(worst, rel_err(fd, grads[name][idx]))
    assert worst < tol, f"worst relative error {worst}"
    return worst


def test_conv2d_gradients():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 10))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b = rng.standard_normal(4) * 0.1
    g = rng.standard_normal((2, 4, 4, 5))

    def loss():
        y, _ = conv2d_forward(x, w, b, stride=2)
        return float(np.sum(g * y))

    y, cache = conv2d_forward(x, w, b, stride=2)
    gx, gw, gb = conv2d_backward(g, cache)
    for arr, grad in ((x, gx), (w, gw), (b, gb)):
        for _ in range(10):
            idx = tuple(rng.integers(s) for s in arr.shape)
            assert rel_err(central_diff(loss, arr, idx), grad[idx]) < 1e-6


def test_group_norm_gradients():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 4, 6))
    gamma = rng.standard_normal(8)
    beta = rng.standard_normal(8)
    g = rng.standard_normal((2, 8, 4, 6))

    def loss():
        y, _ = group_norm_forward(x, gamma, beta, groups=4)
        return float(np.sum(g * y))

    _, cache = group_norm_forward(x, gamma, beta, groups=4)
    gx, gg, gb = group_norm_backward(g, cache)
    for arr, grad in ((x, gx), (gamma, gg), (beta, gb)):
        for _ in range(10):
            idx = tuple(rng.integers(s) for s in arr.shape)
            assert rel_err(central_diff(loss, arr, idx), grad[idx]) < 1e-5


def test_silu_gradient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(50)
    g = rng.standard_normal(50)

    def loss():
        y, _ = silu_forward(x)
        return float(np.sum(g * y))

    _, cache = silu_forward(x)
    gx = silu_backward(g, cache)
    for _ in range(10):
        idx = (rng.integers(50),)
        assert rel_err(central_diff(loss, x, idx), gx[idx]) < 1e-7


def _attn_params(rng, c, src_dim):
    p = {
        "blk.gn.g": rng.standard_normal(c) * 0.5 + 1.0,
        "blk.gn.b": rng.standard_normal(c) * 0.1,
        "blk.wq": rng.standard_normal((c, c)) * 0.3,
        "blk.wk": rng.standard_normal((src_dim, c)) * 0.3,
        "blk.wv": rng.standard_normal((src_dim, c)) * 0.3,
        "blk.wo": rng.standard_normal((c, c)) * 0.3,
        "blk.bq": rng.standard_normal(c) * 0.05,
        "blk.bk": rng.standard_normal(c) * 0.05,
        "blk.bv": rng.standard_normal(c) * 0.05,
        "blk.bo": rng.standard_normal(c) * 0.05,
    }
    return p


@pytest.mark.parametrize("cross", [True, False])
def test_attention_block_gradients(cross):
    rng = np.random.default_rng(3)
    c, src_dim, n_tok = 8, 6, 5
    params = _attn_params(rng, c, src_dim if cross else c)
    x = rng.standard_normal((2, c, 2, 4))
    ctx = rng.standard_normal((2, n_tok, src_dim)) if cross else None
    g = rng.standard_normal(x.shape)

    def loss():
        y, _ = attention_forward(params, "blk", x, ctx, n_heads=2, groups=4)
        return float(np.sum(g * y))

    _, cache = attention_forward(params, "blk", x, ctx, n_heads=2, groups=4)
    grads = {}
    gx, gctx = attention_backward(g, cache, params, grads)
    probe_params(loss, params, grads, rng, 40, tol=1e-5)
    for _ in range(10):
        idx = tuple(rng.integers(s) for s in x.shape)
        assert rel_err(central_diff(loss, x, idx), gx[idx]) < 1e-5
    if cross:
        for _ in range(10):
            idx = tuple(rng.integers(s) for s in ctx.shape)
            assert rel_err(central_diff(loss, ctx, idx), gctx[idx]) < 1e-5


def test_full_net_gradients_200_probes():
    """Analytic vs central finite differences across the whole U-Net,
    including attention projections, at float64."""
    net = EpsilonNet(dtype=np.float64)
    net.randomize(seed=1)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 32, 64))
    ctx = rng.standard_normal((16, 32))
    gvec = rng.standard_normal((1, 32, 64))
    t = 417

    def loss():
        return float(np.sum(gvec * net.forward(x, t, ctx)))

    _, cache = net.forward(x, t, ctx, want_cache=True)
    grads, gx, gctx = net.backward(gvec, cache)
    worst = probe_params(loss, net.params, grads, rng, 200, tol=1e-3)
    assert worst < 1e-3

    for _ in range(15):
        idx = tuple(rng.integers(s) for s in x.shape)
        assert rel_err(central_diff(loss, x, idx), gx[idx]) < 1e-3
    for _ in range(15):
        idx = tuple(rng.integers(s) for s in ctx.shape)
        fd = central_diff(loss, ctx, idx)
        assert rel_err(fd, gctx[0][idx]) < 1e-3


def test_net_batched_gradients_match_per_item():
    net = EpsilonNet(dtype=np.float64)
    net.randomize(seed=2)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 32, 64))
    ctx = rng.standard_normal((3, 16, 32))
    t = np.array([10, 500, 990])
    g = rng.standard_normal(x.shape)

    _, cache = net.forward(x, t, ctx, want_cache=True)
    grads_b, gx_b, _ = net.backward(g, cache)

    total = {k: np.zeros_like(v) for k, v in grads_b.items()}
    for i in range(3):
        _, ci = net.forward(x[i], int(t[i]), ctx[i], want_cache=True)
        gi, gxi, _ = net.backward(g[i], ci)
        for k in total:
            total[k] += gi[k]
        np.testing.assert_allclose(gx_b[i], gxi, atol=1e-10)
    for k in total:
        np.testing.assert_allclose(grads_b[k], total[k], atol=1e-9, err_msg=k)
