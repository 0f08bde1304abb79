"""Cross-/self-attention with per-head map recording and controller hooks.

Attention maps are row-stochastic matrices named by (step, layer, head, kind).
A controller hook may replace a map right before the value product; both the
original and the injected map are recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .layers import group_norm_backward, group_norm_forward, softmax_backward, softmax_rows


@dataclass(frozen=True)
class HookContext:
    step: int | None
    layer: str
    head: int
    kind: str  # "cross" or "self"
    role: str  # "source" or "target"


ControllerHook = Callable[[np.ndarray, HookContext], np.ndarray]


class AttentionRecord:
    """Ordered store of attention maps from one trajectory run.

    Keys are (step, layer, head, kind); values are (B, N, L) arrays (B = 1
    for single runs). ``injected`` holds post-hook maps when a hook ran.
    """

    def __init__(self):
        self.maps: dict[tuple, np.ndarray] = {}
        self.injected: dict[tuple, np.ndarray] = {}
        self.layer_shapes: dict[str, tuple] = {}

    def add(self, key: tuple, arr: np.ndarray, shape_hw: tuple, injected: bool = False):
        store = self.injected if injected else self.maps
        if not injected and key in store:
            raise ConfigError(f"duplicate attention map for key {key}")
        store[key] = arr
        self.layer_shapes[key[1]] = shape_hw

    def cross_maps_at(self, step: int) -> dict:
        return {k: v for k, v in self.maps.items() if k[0] == step and k[3] == "cross"}

    def steps(self):
        return sorted({k[0] for k in self.maps})


def record_mean_map(record: AttentionRecord, step: int) -> np.ndarray:
    """Head- and layer-averaged cross map at a step, rows renormalized, with
    every layer nearest-neighbor upsampled to the finest layer's grid."""
    maps = record.cross_maps_at(step)
    if not maps:
        raise ConfigError(f"no cross-attention maps recorded at step {step}")
    shapes = {key[1]: record.layer_shapes[key[1]] for key in maps}
    h_max = max(h for h, _ in shapes.values())
    w_max = max(w for _, w in shapes.values())
    total = None
    for key, m in maps.items():
        h, w = shapes[key[1]]
        b, n, l = m.shape
        grid = m.reshape(b, h, w, l)
        grid = grid.repeat(h_max // h, axis=1).repeat(w_max // w, axis=2)
        flat = grid.reshape(b, h_max * w_max, l)
        total = flat if total is None else total + flat
    mean = total / len(maps)
    mean = mean / mean.sum(axis=-1, keepdims=True)
    return mean[0] if mean.shape[0] == 1 else mean


@dataclass
class PassContext:
    """Per-forward runtime context threaded through attention blocks."""

    step: int | None = None
    role: str = "source"
    hook: ControllerHook | None = None
    recorder: AttentionRecord | None = None
    record_self: bool = False


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, c = x.shape
    return x.reshape(b, n, n_heads, c // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def attention_forward(params: dict, prefix: str, x: np.ndarray,
                      context: np.ndarray | None, n_heads: int,
                      pass_ctx: PassContext | None = None,
                      layer: str = "", groups: int = 4, gain: float = 1.0):
    """Residual attention block on (B,C,H,W) features.

    ``context`` is the (B, L, d_text) prompt embedding for cross-attention or
    None for self-attention over the flattened positions. ``gain`` is a fixed
    multiplier on the block output; it rebalances how fast the (weak-signal)
    conditioning path trains under plain SGD.
    """
    p = params
    b, c, hh, ww = x.shape
    kind = "self" if context is None else "cross"
    gn_out, c_gn = group_norm_forward(x, p[prefix + ".gn.g"], p[prefix + ".gn.b"], groups)
    tokens = gn_out.reshape(b, c, hh * ww).transpose(0, 2, 1)
    src = tokens if context is None else context
    q = tokens @ p[prefix + ".wq"] + p[prefix + ".bq"]
    k = src @ p[prefix + ".wk"] + p[prefix + ".bk"]
    v = src @ p[prefix + ".wv"] + p[prefix + ".bv"]
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    # python float: a numpy scalar would silently upcast float32 activations
    scale = float(1.0 / np.sqrt(qh.shape[-1]))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    probs = softmax_rows(scores)

    used = probs
    hooked = False
    if pass_ctx is not None and (pass_ctx.recorder is not None or pass_ctx.hook is not None):
        record = pass_ctx.recorder is not None and (
            kind == "cross" or pass_ctx.record_self
        )
        heads_out = []
        for head in range(n_heads):
            m = probs[:, head]
            key = (pass_ctx.step, layer, head, kind)
            if record:
                pass_ctx.recorder.add(key, m, (hh, ww))
            if pass_ctx.hook is not None:
                ctx_info = HookContext(pass_ctx.step, layer, head, kind, pass_ctx.role)
                m2 = pass_ctx.hook(m, ctx_info)
                if m2.shape != m.shape:
                    raise ConfigError(
                        f"hook returned shape {m2.shape} != {m.shape} "
                        f"at step {pass_ctx.step}, layer {layer}"
                    )
                if m2 is not m:
                    hooked = True
                    if record:
                        pass_ctx.recorder.add(key, m2, (hh, ww), injected=True)
                heads_out.append(m2)
            else:
                heads_out.append(m)
        if pass_ctx.hook is not None:
            used = np.stack(heads_out, axis=1)

    out_h = used @ vh
    merged = _merge_heads(out_h)
    proj = merged @ p[prefix + ".wo"] + p[prefix + ".bo"]
    y = x + gain * proj.transpose(0, 2, 1).reshape(b, c, hh, ww)
    cache = (c_gn, tokens, src, qh, kh, vh, probs, used, merged, scale,
             context is None, (b, c, hh, ww), prefix, n_heads, hooked, gain)
    return y, cache


def attention_backward(g: np.ndarray, cache, params: dict, grads: dict):
    """Gradients for attention_forward; returns (gx, gcontext or None)."""
    (c_gn, tokens, src, qh, kh, vh, probs, used, merged, scale,
     is_self, (b, c, hh, ww), prefix, n_heads, hooked, gain) = cache
    if hooked:
        raise ConfigError("cannot backpropagate through a hooked attention pass")
    p = params

    g_proj = (gain * g).reshape(b, c, hh * ww).transpose(0, 2, 1)
    grads[prefix + ".wo"] = merged.reshape(-1, c).T @ g_proj.reshape(-1, c)
    grads[prefix + ".bo"] = g_proj.sum(axis=(0, 1))
    g_merged = g_proj @ p[prefix + ".wo"].T
    g_heads = _split_heads(g_merged, n_heads)

    g_used = g_heads @ vh.transpose(0, 1, 3, 2)
    gvh = used.transpose(0, 1, 3, 2) @ g_heads
    g_scores = softmax_backward(g_used, probs) * scale
    gqh = g_scores @ kh
    gkh = g_scores.transpose(0, 1, 3, 2) @ qh

    gq = _merge_heads(gqh)
    gk = _merge_heads(gkh)
    gv = _merge_heads(gvh)

    d_in = tokens.shape[-1]
    d_src = src.shape[-1]
    grads[prefix + ".wq"] = tokens.reshape(-1, d_in).T @ gq.reshape(-1, c)
    grads[prefix + ".bq"] = gq.sum(axis=(0, 1))
    grads[prefix + ".wk"] = src.reshape(-1, d_src).T @ gk.reshape(-1, c)
    grads[prefix + ".bk"] = gk.sum(axis=(0, 1))
    grads[prefix + ".wv"] = src.reshape(-1, d_src).T @ gv.reshape(-1, c)
    grads[prefix + ".bv"] = gv.sum(axis=(0, 1))

    g_tokens = gq @ p[prefix + ".wq"].T
    g_src = gk @ p[prefix + ".wk"].T + gv @ p[prefix + ".wv"].T
    gcontext = None
    if is_self:
        g_tokens = g_tokens + g_src
    else:
        gcontext = g_src
    g_gn = g_tokens.transpose(0, 2, 1).reshape(b, c, hh, ww)
    gx_gn, grads[prefix + ".gn.g"], grads[prefix + ".gn.b"] = group_norm_backward(g_gn, c_gn)
    return g + gx_gn, gcontext
