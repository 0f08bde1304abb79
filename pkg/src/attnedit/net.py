"""Noise-prediction U-Net over (freq, frames) grids, with hand-written backward.

Layout: an 8/12-channel conv stem brings the 32x64 grid down to two attention
levels (16 channels at 8x16, 32 channels at 4x8), each carrying one residual
block, one self-attention block and one cross-attention block; the bottleneck
adds residual + cross-attention + residual. The decoder mirrors the stem with
nearest-neighbor upsampling and additive skips. Total parameter count stays
under 200k.
"""

from __future__ import annotations

import numpy as np

from .attention import PassContext, attention_backward, attention_forward
from .errors import ConfigError
from .layers import (
    conv2d_backward,
    conv2d_forward,
    group_norm_backward,
    group_norm_forward,
    linear_backward,
    linear_forward,
    silu_backward,
    silu_forward,
    timestep_embedding,
    upsample2_backward,
    upsample2_forward,
)

TIME_DIM = 64
N_HEADS = 2
GROUPS = 4
CROSS_GAIN = 9.0

ATTENTION_LAYERS = ("down1.self", "down1.cross", "down2.self", "down2.cross", "mid.cross")
CROSS_LAYERS = ("down1.cross", "down2.cross", "mid.cross")


class EpsilonNet:
    """Text-conditioned noise predictor; forward/backward are explicit."""

    def __init__(self, freq_bins: int = 32, frames: int = 64, text_dim: int = 32,
                 seed: int = 0, dtype=np.float32):
        if freq_bins % 8 or frames % 8:
            raise ConfigError("grid dims must be divisible by 8")
        self.freq_bins = freq_bins
        self.frames = frames
        self.text_dim = text_dim
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self._init_params(seed)

    # ------------------------------------------------------------------
    def _init_params(self, seed: int):
        from .rng import rng_for

        rng = rng_for("epsilon-net-init", seed)
        dt = self.dtype
        p = self.params

        def norm(shape, fan_in):
            return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt)

        def conv(name, cout, cin, zero=False):
            p[name + ".w"] = (np.zeros((cout, cin, 3, 3), dtype=dt) if zero
                              else norm((cout, cin, 3, 3), cin * 9))
            p[name + ".b"] = np.zeros(cout, dtype=dt)

        def lin(name, nin, nout, zero=False):
            p[name + ".w"] = (np.zeros((nin, nout), dtype=dt) if zero
                              else norm((nin, nout), nin))
            p[name + ".b"] = np.zeros(nout, dtype=dt)

        def gn(name, c):
            p[name + ".g"] = np.ones(c, dtype=dt)
            p[name + ".b"] = np.zeros(c, dtype=dt)

        def res(name, c):
            gn(name + ".gn1", c)
            conv(name + ".conv1", c, c)
            lin(name + ".tproj", TIME_DIM, c)
            gn(name + ".gn2", c)
            conv(name + ".conv2", c, c, zero=True)

        def attn(name, c, src_dim):
            # non-zero out-proj and boosted value path: plain SGD starves the
            # conditioning signal coming from the few informative tokens
            gn(name + ".gn", c)
            p[name + ".wq"] = norm((c, c), c)
            p[name + ".wk"] = norm((src_dim, c), src_dim)
            p[name + ".wv"] = 2.5 * norm((src_dim, c), src_dim)
            p[name + ".wo"] = 0.5 * norm((c, c), c)
            for part in "qkvo":
                p[name + ".b" + part] = np.zeros(c, dtype=dt)

        lin("time.lin1", TIME_DIM, TIME_DIM)
        lin("time.lin2", TIME_DIM, TIME_DIM)
        conv("stem.in", 8, 1)
        conv("stem.down0", 12, 8)
        conv("stem.down1", 16, 12)
        res("down1.res", 16)
        attn("down1.self", 16, 16)
        attn("down1.cross", 16, self.text_dim)
        conv("down2.down", 32, 16)
        res("down2.res", 32)
        attn("down2.self", 32, 32)
        attn("down2.cross", 32, self.text_dim)
        res("mid.res1", 32)
        attn("mid.cross", 32, self.text_dim)
        res("mid.res2", 32)
        conv("up2.merge", 16, 48)
        res("up2.res", 16)
        lin("up1.proj", 16, 12)
        lin("up1.tproj", TIME_DIM, 12)
        conv("up1.conv", 12, 12)
        lin("up0.proj", 12, 8)
        lin("up0.tproj", TIME_DIM, 8)
        conv("out.conv", 1, 8, zero=True)

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def randomize(self, seed: int, scale: float = 0.08):
        """Overwrite every parameter with small random values (gradient checks)."""
        from .rng import rng_for

        rng = rng_for("epsilon-net-randomize", seed)
        for k in self.params:
            self.params[k] = (scale * rng.standard_normal(self.params[k].shape)
                              ).astype(self.dtype)

    # ------------------------------------------------------------------
    def _res_forward(self, name, x, tact, caches):
        p = self.params
        a, c_gn1 = group_norm_forward(x, p[name + ".gn1.g"], p[name + ".gn1.b"], GROUPS)
        a, c_s1 = silu_forward(a)
        a, c_c1 = conv2d_forward(a, p[name + ".conv1.w"], p[name + ".conv1.b"])
        tp, c_tp = linear_forward(tact, p[name + ".tproj.w"], p[name + ".tproj.b"])
        a = a + tp[:, :, None, None]
        h, c_gn2 = group_norm_forward(a, p[name + ".gn2.g"], p[name + ".gn2.b"], GROUPS)
        h, c_s2 = silu_forward(h)
        h, c_c2 = conv2d_forward(h, p[name + ".conv2.w"], p[name + ".conv2.b"])
        caches[name] = (c_gn1, c_s1, c_c1, c_tp, c_gn2, c_s2, c_c2)
        return x + h

    def _res_backward(self, name, g, caches, grads):
        c_gn1, c_s1, c_c1, c_tp, c_gn2, c_s2, c_c2 = caches[name]
        gh, grads[name + ".conv2.w"], grads[name + ".conv2.b"] = conv2d_backward(g, c_c2)
        gh = silu_backward(gh, c_s2)
        gh, grads[name + ".gn2.g"], grads[name + ".gn2.b"] = group_norm_backward(gh, c_gn2)
        gtp = gh.sum(axis=(2, 3))
        gt, grads[name + ".tproj.w"], grads[name + ".tproj.b"] = linear_backward(gtp, c_tp)
        ga, grads[name + ".conv1.w"], grads[name + ".conv1.b"] = conv2d_backward(gh, c_c1)
        ga = silu_backward(ga, c_s1)
        ga, grads[name + ".gn1.g"], grads[name + ".gn1.b"] = group_norm_backward(ga, c_gn1)
        return g + ga, gt

    def _proj_forward(self, name, x, caches):
        # 1x1 convolution as a linear map over channels
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w).transpose(0, 2, 1)
        y, cache = linear_forward(flat, self.params[name + ".w"], self.params[name + ".b"])
        caches[name] = (cache, (b, c, h, w))
        cout = y.shape[-1]
        return y.transpose(0, 2, 1).reshape(b, cout, h, w)

    def _proj_backward(self, name, g, caches, grads):
        cache, (b, c, h, w) = caches[name]
        cout = g.shape[1]
        gflat = g.reshape(b, cout, h * w).transpose(0, 2, 1)
        gx, grads[name + ".w"], grads[name + ".b"] = linear_backward(gflat, cache)
        return gx.transpose(0, 2, 1).reshape(b, c, h, w)

    # ------------------------------------------------------------------
    def forward(self, x: np.ndarray, t, context: np.ndarray,
                pass_ctx: PassContext | None = None, want_cache: bool = False):
        """Predict noise for latents x (B,F,T) or (F,T) given timestep(s) t and
        a prompt embedding (L,d) or per-item (B,L,d)."""
        p = self.params
        single = x.ndim == 2
        x = np.asarray(x, dtype=self.dtype)
        if single:
            x = x[None]
        b = x.shape[0]
        if x.shape[1:] != (self.freq_bins, self.frames):
            raise ConfigError(f"latent shape {x.shape[1:]} != "
                              f"({self.freq_bins}, {self.frames})")
        context = np.asarray(context, dtype=self.dtype)
        if context.ndim == 2:
            context = np.broadcast_to(context[None], (b,) + context.shape)
        caches: dict = {}

        emb = timestep_embedding(t, TIME_DIM).astype(self.dtype)
        if emb.shape[0] == 1 and b > 1:
            emb = np.broadcast_to(emb, (b, TIME_DIM))
        tb, c_tl1 = linear_forward(emb, p["time.lin1.w"], p["time.lin1.b"])
        tb, c_ts1 = silu_forward(tb)
        tb, c_tl2 = linear_forward(tb, p["time.lin2.w"], p["time.lin2.b"])
        tact, c_ts2 = silu_forward(tb)
        caches["time"] = (c_tl1, c_ts1, c_tl2, c_ts2)

        s0, caches["stem.in"] = conv2d_forward(x[:, None], p["stem.in.w"], p["stem.in.b"])
        a0, caches["stem.s0"] = silu_forward(s0)
        s1, caches["stem.down0"] = conv2d_forward(a0, p["stem.down0.w"], p["stem.down0.b"],
                                                  stride=2)
        a1, caches["stem.s1"] = silu_forward(s1)
        h, caches["stem.down1"] = conv2d_forward(a1, p["stem.down1.w"], p["stem.down1.b"],
                                                 stride=2)

        h = self._res_forward("down1.res", h, tact, caches)
        h, caches["down1.self"] = attention_forward(p, "down1.self", h, None, N_HEADS,
                                                    pass_ctx, layer="down1.self",
                                                    groups=GROUPS)
        h, caches["down1.cross"] = attention_forward(p, "down1.cross", h, context,
                                                     N_HEADS, pass_ctx,
                                                     layer="down1.cross", groups=GROUPS,
                                                     gain=CROSS_GAIN)
        skip1 = h

        ha, caches["down2.silu"] = silu_forward(h)
        h, caches["down2.down"] = conv2d_forward(ha, p["down2.down.w"], p["down2.down.b"],
                                                 stride=2)
        h = self._res_forward("down2.res", h, tact, caches)
        h, caches["down2.self"] = attention_forward(p, "down2.self", h, None, N_HEADS,
                                                    pass_ctx, layer="down2.self",
                                                    groups=GROUPS)
        h, caches["down2.cross"] = attention_forward(p, "down2.cross", h, context,
                                                     N_HEADS, pass_ctx,
                                                     layer="down2.cross", groups=GROUPS,
                                                     gain=CROSS_GAIN)

        h = self._res_forward("mid.res1", h, tact, caches)
        h, caches["mid.cross"] = attention_forward(p, "mid.cross", h, context, N_HEADS,
                                                   pass_ctx, layer="mid.cross",
                                                   groups=GROUPS, gain=CROSS_GAIN)
        h = self._res_forward("mid.res2", h, tact, caches)

        u, caches["up2.up"] = upsample2_forward(h)
        u = np.concatenate([u, skip1], axis=1)
        u, caches["up2.merge"] = conv2d_forward(u, p["up2.merge.w"], p["up2.merge.b"])
        u = self._res_forward("up2.res", u, tact, caches)

        u, caches["up1.up"] = upsample2_forward(u)
        u = self._proj_forward("up1.proj", u, caches)
        tp1, caches["up1.tproj"] = linear_forward(tact, p["up1.tproj.w"], p["up1.tproj.b"])
        u = u + s1 + tp1[:, :, None, None]
        u, caches["up1.silu"] = silu_forward(u)
        u, caches["up1.conv"] = conv2d_forward(u, p["up1.conv.w"], p["up1.conv.b"])

        u, caches["up0.up"] = upsample2_forward(u)
        u = self._proj_forward("up0.proj", u, caches)
        tp0, caches["up0.tproj"] = linear_forward(tact, p["up0.tproj.w"], p["up0.tproj.b"])
        u = u + s0 + tp0[:, :, None, None]
        u, caches["up0.silu"] = silu_forward(u)
        out, caches["out.conv"] = conv2d_forward(u, p["out.conv.w"], p["out.conv.b"])
        eps = out[:, 0]
        if single:
            eps = eps[0]
        if want_cache:
            caches["_meta"] = (single, b, context.shape)
            return eps, caches
        return eps

    # ------------------------------------------------------------------
    def backward(self, g_eps: np.ndarray, caches: dict):
        """Gradients of sum(g_eps * eps) w.r.t. params, input latent, context.

        Returns (grads, gx, gcontext); gcontext is summed over positions per
        batch item, shape matching the (B, L, d) context.
        """
        p = self.params
        single, b, ctx_shape = caches["_meta"]
        g = np.asarray(g_eps, dtype=self.dtype)
        if single:
            g = g[None]
        grads: dict[str, np.ndarray] = {}
        gt_total = np.zeros((b, TIME_DIM), dtype=self.dtype)
        gctx_total = np.zeros(ctx_shape, dtype=self.dtype)

        gu, grads["out.conv.w"], grads["out.conv.b"] = conv2d_backward(g[:, None],
                                                                       caches["out.conv"])
        gu = silu_backward(gu, caches["up0.silu"])
        gs0 = gu
        gt, grads["up0.tproj.w"], grads["up0.tproj.b"] = linear_backward(
            gu.sum(axis=(2, 3)), caches["up0.tproj"])
        gt_total += gt
        gu = self._proj_backward("up0.proj", gu, caches, grads)
        gu = upsample2_backward(gu, caches["up0.up"])

        gui, grads["up1.conv.w"], grads["up1.conv.b"] = conv2d_backward(gu,
                                                                        caches["up1.conv"])
        gui = silu_backward(gui, caches["up1.silu"])
        gs1 = gui
        gt, grads["up1.tproj.w"], grads["up1.tproj.b"] = linear_backward(
            gui.sum(axis=(2, 3)), caches["up1.tproj"])
        gt_total += gt
        gui = self._proj_backward("up1.proj", gui, caches, grads)
        gu = upsample2_backward(gui, caches["up1.up"])

        gu, gt = self._res_backward("up2.res", gu, caches, grads)
        gt_total += gt
        gu, grads["up2.merge.w"], grads["up2.merge.b"] = conv2d_backward(gu,
                                                                         caches["up2.merge"])
        gmid = upsample2_backward(gu[:, :32], caches["up2.up"])
        gskip1 = gu[:, 32:]

        gmid, gt = self._res_backward("mid.res2", gmid, caches, grads)
        gt_total += gt
        gmid, gctx = attention_backward(gmid, caches["mid.cross"], p, grads)
        gctx_total += gctx
        gmid, gt = self._res_backward("mid.res1", gmid, caches, grads)
        gt_total += gt

        gmid, gctx = attention_backward(gmid, caches["down2.cross"], p, grads)
        gctx_total += gctx
        gmid, _ = attention_backward(gmid, caches["down2.self"], p, grads)
        gmid, gt = self._res_backward("down2.res", gmid, caches, grads)
        gt_total += gt
        gh, grads["down2.down.w"], grads["down2.down.b"] = conv2d_backward(
            gmid, caches["down2.down"])
        gh = silu_backward(gh, caches["down2.silu"])
        gh = gh + gskip1

        gh, gctx = attention_backward(gh, caches["down1.cross"], p, grads)
        gctx_total += gctx
        gh, _ = attention_backward(gh, caches["down1.self"], p, grads)
        gh, gt = self._res_backward("down1.res", gh, caches, grads)
        gt_total += gt

        ga1, grads["stem.down1.w"], grads["stem.down1.b"] = conv2d_backward(
            gh, caches["stem.down1"])
        ga1 = silu_backward(ga1, caches["stem.s1"])
        ga1 = ga1 + gs1
        ga0, grads["stem.down0.w"], grads["stem.down0.b"] = conv2d_backward(
            ga1, caches["stem.down0"])
        ga0 = silu_backward(ga0, caches["stem.s0"])
        ga0 = ga0 + gs0
        gx4, grads["stem.in.w"], grads["stem.in.b"] = conv2d_backward(
            ga0, caches["stem.in"])
        gx = gx4[:, 0]

        c_tl1, c_ts1, c_tl2, c_ts2 = caches["time"]
        gtb = silu_backward(gt_total, c_ts2)
        gtb, grads["time.lin2.w"], grads["time.lin2.b"] = linear_backward(gtb, c_tl2)
        gtb = silu_backward(gtb, c_ts1)
        _, grads["time.lin1.w"], grads["time.lin1.b"] = linear_backward(gtb, c_tl1)

        if single:
            gx = gx[0]
        return grads, gx, gctx_total
