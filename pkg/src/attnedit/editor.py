"""Attention-map editing: token alignment, scheduler-weighted map fusion for
Replace/Refine/Reweight, the full edit loop over an inverted trajectory, and
two-source refusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionRecord, HookContext, PassContext
from .errors import ConfigError
from .fuser import FuserConfig, schedule_ratio
from .inversion import (
    LatentTrajectory,
    ddim_invert,
    edit_friendly_invert,
    null_text_invert,
)
from .net import EpsilonNet
from .rng import rng_for
from .sampling import cfg_epsilon, encode_spectrogram, to_spectrogram
from .schedule import (
    InferencePlan,
    NoiseSchedule,
    check_finite,
    ddim_step,
    ddpm_step,
    q_sample,
)
from .world import World


# ----------------------------------------------------------------------
# token alignment
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TokenAlignment:
    """Injective partial map from target token positions to source positions;
    unmapped target positions are 'new'."""

    mapping: tuple  # length L; entry = source index or None

    def source_for(self, j: int):
        return self.mapping[j]

    @property
    def new_positions(self):
        return tuple(j for j, s in enumerate(self.mapping) if s is None)

    @staticmethod
    def identity(length: int) -> "TokenAlignment":
        return TokenAlignment(tuple(range(length)))


def align_tokens(source_tokens: np.ndarray, target_tokens: np.ndarray) -> TokenAlignment:
    """Longest-common-subsequence alignment on token ids. Inside replaced
    spans, positions map prefix-wise; leftover target positions are new."""
    s = [int(v) for v in source_tokens]
    tgt = [int(v) for v in target_tokens]
    n, m = len(s), len(tgt)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if s[i] == tgt[j]:
                dp[i, j] = dp[i + 1, j + 1] + 1
            else:
                dp[i, j] = max(dp[i + 1, j], dp[i, j + 1])
    anchors = []
    i = j = 0
    while i < n and j < m:
        if s[i] == tgt[j]:
            anchors.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1, j] >= dp[i, j + 1]:
            i += 1
        else:
            j += 1
    mapping: list = [None] * m
    bounds = [(-1, -1)] + anchors + [(n, m)]
    for (i0, j0) in anchors:
        mapping[j0] = i0
    for (pi, pj), (ni, nj) in zip(bounds[:-1], bounds[1:]):
        src_gap = list(range(pi + 1, ni))
        tgt_gap = list(range(pj + 1, nj))
        for k in range(min(len(src_gap), len(tgt_gap))):
            mapping[tgt_gap[k]] = src_gap[k]
    return TokenAlignment(tuple(mapping))


# ----------------------------------------------------------------------
# edit instructions and fusion
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class EditInstruction:
    """Tagged edit variant. 'replace' blends whole maps through the alignment;
    'refine' blends only the selected (new-token) columns; 'reweight' scales
    the selected columns by c while blending."""

    task: str
    alignment: TokenAlignment | None = None
    columns: tuple = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.task not in ("replace", "refine", "reweight"):
            raise ConfigError(f"unknown edit task {self.task!r}")
        if not -4.0 <= self.scale <= 4.0:
            raise ConfigError("reweight scale outside [-4, 4]")

    @staticmethod
    def replace(alignment: TokenAlignment | None = None) -> "EditInstruction":
        return EditInstruction("replace", alignment=alignment)

    @staticmethod
    def refine(new_columns, alignment: TokenAlignment | None = None) -> "EditInstruction":
        return EditInstruction("refine", alignment=alignment,
                               columns=tuple(int(c) for c in np.atleast_1d(new_columns)))

    @staticmethod
    def reweight(columns, c: float) -> "EditInstruction":
        return EditInstruction("reweight", alignment=None, scale=float(c),
                               columns=tuple(int(v) for v in np.atleast_1d(columns)))


def _align_columns(m_src: np.ndarray, m_tgt: np.ndarray,
                   alignment: TokenAlignment) -> np.ndarray:
    """Permute the source map's columns into the target index space; new
    columns take the target map's values."""
    ncols = m_tgt.shape[-1]
    if len(alignment.mapping) != ncols:
        raise ConfigError("alignment length does not match map columns")
    out = np.array(m_tgt, dtype=np.float64, copy=True)
    for j, src in enumerate(alignment.mapping):
        if src is not None:
            if not 0 <= src < m_src.shape[-1]:
                raise ConfigError(f"alignment source column {src} out of range")
            out[..., j] = m_src[..., src]
    return out


def fuse(m_src: np.ndarray, m_tgt: np.ndarray, t, instr: EditInstruction,
         cfg: FuserConfig) -> np.ndarray:
    """Scheduler-weighted fusion of a source and a target attention map at a
    denoising step. Rows are deliberately not renormalized: reweighting is
    meant to change the selected token's total attention mass."""
    if m_src.shape[:-1] != m_tgt.shape[:-1]:
        raise ConfigError(f"map shapes {m_src.shape} / {m_tgt.shape} disagree")
    s = schedule_ratio(cfg, t)
    tgt = np.asarray(m_tgt, dtype=np.float64)
    if instr.task == "replace":
        if instr.alignment is None:
            raise ConfigError("replace fusion needs a token alignment")
        aligned = _align_columns(m_src, tgt, instr.alignment)
        fused = s * tgt + (1.0 - s) * aligned
    else:
        alignment = instr.alignment or TokenAlignment.identity(m_tgt.shape[-1])
        aligned = _align_columns(m_src, tgt, alignment)
        for j in instr.columns:
            if not 0 <= j < m_tgt.shape[-1]:
                raise ConfigError(f"selected column {j} out of range")
        cols = list(instr.columns)
        c = instr.scale if instr.task == "reweight" else 1.0
        fused = aligned.copy()
        fused[..., cols] = c * s * tgt[..., cols] + (1.0 - s) * aligned[..., cols]
    return fused.astype(m_tgt.dtype)


def fuse_self(m_src: np.ndarray, m_tgt: np.ndarray, t, cfg: FuserConfig) -> np.ndarray:
    """Self-attention fusion: plain scheduler blend, no token alignment."""
    s = schedule_ratio(cfg, t)
    fused = s * np.asarray(m_tgt, dtype=np.float64) + (1.0 - s) * np.asarray(
        m_src, dtype=np.float64)
    return fused.astype(m_tgt.dtype)


# ----------------------------------------------------------------------
# the edit loop
# ----------------------------------------------------------------------
@dataclass
class EditResult:
    latent: np.ndarray
    spectrogram: np.ndarray
    source_record: AttentionRecord
    target_record: AttentionRecord
    fused_maps: dict
    config: FuserConfig
    guidance: float
    trajectory: LatentTrajectory


class _Injector:
    """Controller hook replacing cross/self maps with prepared fused maps."""

    def __init__(self):
        self.fused: dict = {}

    def __call__(self, m: np.ndarray, ctx: HookContext) -> np.ndarray:
        key = (ctx.step, ctx.layer, ctx.head, ctx.kind)
        out = self.fused.get(key)
        return m if out is None else out


def _invert(x0, src_ctx, null, plan, sched, net, seed, method, inversion_w,
            null_text_opts):
    if method == "ddpm_edit_friendly":
        return edit_friendly_invert(x0, src_ctx, null, plan, sched, net, seed,
                                    w=inversion_w)
    if method == "ddim":
        return ddim_invert(x0, src_ctx, null, plan, sched, net, w=inversion_w)
    if method == "null_text":
        opts = null_text_opts or {}
        return null_text_invert(x0, src_ctx, null, plan, sched, net, **opts)
    raise ConfigError(f"unknown inversion method {method!r}")


def _source_step(traj, i, z_src, t, t_prev, src_ctx, null, net, sched, pc):
    """Advance the source trajectory one step, recording its attention maps.

    Edit-friendly trajectories replay bitwise from storage, so only the
    map-recording conditional pass runs; DDIM/null-text re-run the sampler.
    """
    if traj.kind == "ddpm_edit_friendly":
        net.forward(traj.latents[i], t, src_ctx, pass_ctx=pc)
        return traj.latents[i + 1]
    null_i = traj.null_embeddings[i] if traj.null_embeddings is not None else null
    eps = cfg_epsilon(net, z_src, t, src_ctx, null_i, traj.inversion_w, pc)
    return ddim_step(z_src, eps, t, t_prev, sched)


def run_edit(spectrogram: np.ndarray, source_prompt, target_prompt,
             instr: EditInstruction, cfg: FuserConfig, w: float,
             net: EpsilonNet, world: World, plan: InferencePlan,
             sched: NoiseSchedule, seed: int,
             inversion: str = "ddpm_edit_friendly", inversion_w: float = 0.0,
             null_text_opts: dict | None = None,
             record_batch: bool = True) -> EditResult:
    """Invert the input on the source prompt, then denoise the target prompt
    with per-step fused attention maps injected (the full edit pipeline)."""
    x0 = encode_spectrogram(np.asarray(spectrogram, dtype=np.float64))
    single = x0.ndim == 2
    if single:
        x0 = x0[None]
    b = x0.shape[0]

    src_tokens = (world.tokenize(source_prompt)
                  if isinstance(source_prompt, str) else np.asarray(source_prompt))
    tgt_tokens = (world.tokenize(target_prompt)
                  if isinstance(target_prompt, str) else np.asarray(target_prompt))
    if instr.task == "reweight" and not np.array_equal(src_tokens, tgt_tokens):
        raise ConfigError("reweight requires identical source and target prompts")
    if instr.alignment is None and instr.task in ("replace", "refine"):
        instr = EditInstruction(instr.task,
                                alignment=align_tokens(src_tokens, tgt_tokens),
                                columns=instr.columns, scale=instr.scale)
    src_ctx = world.embed(src_tokens)
    tgt_ctx = world.embed(tgt_tokens)
    null = world.null_embedding()

    traj = _invert(x0, src_ctx, null, plan, sched, net, seed, inversion,
                   inversion_w, null_text_opts)
    out = _edit_loop(traj, src_ctx, tgt_ctx, instr, cfg, w, net, null, plan,
                     sched, seed)
    latent, src_rec, tgt_rec, fused_store, cfg_res = out
    if single:
        latent = latent[0]
    return EditResult(latent=latent, spectrogram=to_spectrogram(latent),
                      source_record=src_rec, target_record=tgt_rec,
                      fused_maps=fused_store, config=cfg_res, guidance=w,
                      trajectory=traj)


def _edit_loop(traj: LatentTrajectory, src_ctx, tgt_ctx, instr, cfg: FuserConfig,
               w: float, net: EpsilonNet, null, plan: InferencePlan,
               sched: NoiseSchedule, seed: int):
    ts = traj.timesteps
    steps = len(ts)
    k = cfg.skip
    if not 0 <= k < steps:
        raise ConfigError(f"skip {k} outside [0, {steps})")
    denoise_steps = steps - k
    cfg_res = cfg.resolved(denoise_steps)
    n_cross = math.ceil(cfg_res.cross_replace_frac * denoise_steps)
    n_self = math.ceil(cfg_res.self_replace_frac * denoise_steps)
    record_self = n_self > 0

    src_rec = AttentionRecord()
    tgt_rec = AttentionRecord()
    fused_store: dict = {}
    injector = _Injector()

    z_src = traj.latents[k]
    z_tgt = traj.latents[k].copy()
    for i in range(k, steps):
        step_idx = i - k
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < steps else 0

        pc_src = PassContext(step=step_idx, role="source", recorder=src_rec,
                             record_self=record_self)
        z_src = _source_step(traj, i, z_src, t, t_prev, src_ctx, null, net,
                             sched, pc_src)

        pc_tgt = PassContext(step=step_idx, role="target", recorder=tgt_rec,
                             record_self=record_self)
        eps_clean = net.forward(z_tgt, t, tgt_ctx, pass_ctx=pc_tgt)

        injector.fused = {}
        for key, m_src in src_rec.maps.items():
            if key[0] != step_idx:
                continue
            kind = key[3]
            m_tgt = tgt_rec.maps.get(key)
            if m_tgt is None:
                continue
            if kind == "cross" and step_idx < n_cross:
                injector.fused[key] = fuse(m_src, m_tgt, step_idx, instr, cfg_res)
            elif kind == "self" and step_idx < n_self:
                injector.fused[key] = fuse_self(m_src, m_tgt, step_idx, cfg_res)
        fused_store.update(injector.fused)

        if injector.fused:
            pc_inj = PassContext(step=step_idx, role="target", hook=injector)
            eps_c = net.forward(z_tgt, t, tgt_ctx, pass_ctx=pc_inj)
        else:
            eps_c = eps_clean
        if w == 1.0:
            eps = eps_c
        elif w == 0.0:
            eps = net.forward(z_tgt, t, null)
        else:
            eps_u = net.forward(z_tgt, t, null)
            eps = w * eps_c + (1.0 - w) * eps_u

        if traj.kind == "ddpm_edit_friendly":
            z_tgt = ddpm_step(z_tgt, eps, t, sched, traj.noises[i], t_prev)
        else:
            z_tgt = ddim_step(z_tgt, eps, t, t_prev, sched)
        check_finite(z_tgt, f"edited latent at denoising step {step_idx}")

    if cfg_res.extra_steps > 0:
        z_tgt = _extra_regeneration(z_tgt, tgt_ctx, null, w, net, plan, sched,
                                    ts, cfg_res.extra_steps, seed)
    return z_tgt, src_rec, tgt_rec, fused_store, cfg_res


def _extra_regeneration(z, tgt_ctx, null, w, net, plan, sched, ts, extra, seed):
    """Re-noise to a shallow level and denoise without injection (appended
    regeneration steps)."""
    steps = len(ts)
    extra = min(extra, steps)
    rng = rng_for("extra-regeneration", seed)
    t_start = int(ts[steps - extra])
    z = q_sample(z, t_start, rng.standard_normal(z.shape), sched)
    for i in range(steps - extra, steps):
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < steps else 0
        eps = cfg_epsilon(net, z, t, tgt_ctx, null, w)
        if plan.sampler == "ddpm":
            z = ddpm_step(z, eps, t, sched, rng.standard_normal(z.shape), t_prev)
        else:
            z = ddim_step(z, eps, t, t_prev, sched)
    return z


# ----------------------------------------------------------------------
# refusion
# ----------------------------------------------------------------------
REFUSE_DEFAULTS = dict(eta_min=0.4, eta_max=0.6)


def refuse(spec1: np.ndarray, prompt1, sel1, spec2: np.ndarray, prompt2, sel2,
           cfg: FuserConfig | None, w: float, net: EpsilonNet, world: World,
           plan: InferencePlan, sched: NoiseSchedule, seeds,
           inversion_w: float = 0.0) -> EditResult:
    """Blend selected attention columns from two inverted sources into one
    output: source 1 drives the trajectory, source 2 contributes the columns
    at its selected token positions (prompt words included)."""
    sel1 = tuple(int(v) for v in np.atleast_1d(sel1)) if len(np.atleast_1d(sel1)) else ()
    sel2 = tuple(int(v) for v in np.atleast_1d(sel2)) if len(np.atleast_1d(sel2)) else ()
    if set(sel1) & set(sel2):
        raise ConfigError("overlapping token selections")
    if cfg is None:
        cfg = FuserConfig(**REFUSE_DEFAULTS)
    seed1, seed2 = seeds

    tok1 = world.tokenize(prompt1) if isinstance(prompt1, str) else np.asarray(prompt1)
    tok2 = world.tokenize(prompt2) if isinstance(prompt2, str) else np.asarray(prompt2)
    fused_tokens = tok1.copy()
    fused_tokens[list(sel2)] = tok2[list(sel2)]
    ctx1, ctx2 = world.embed(tok1), world.embed(tok2)
    fused_ctx = world.embed(fused_tokens)
    null = world.null_embedding()

    x1 = encode_spectrogram(np.asarray(spec1, dtype=np.float64))
    x2 = encode_spectrogram(np.asarray(spec2, dtype=np.float64))
    single = x1.ndim == 2
    if single:
        x1, x2 = x1[None], x2[None]
    traj1 = edit_friendly_invert(x1, ctx1, null, plan, sched, net, seed1,
                                 w=inversion_w)
    traj2 = edit_friendly_invert(x2, ctx2, null, plan, sched, net, seed2,
                                 w=inversion_w)

    ts = traj1.timesteps
    steps = len(ts)
    k = cfg.skip
    if not 0 <= k < steps:
        raise ConfigError(f"skip {k} outside [0, {steps})")
    denoise_steps = steps - k
    cfg_res = cfg.resolved(denoise_steps)
    n_cross = math.ceil(cfg_res.cross_replace_frac * denoise_steps)

    rec1 = AttentionRecord()
    rec2 = AttentionRecord()
    fused_store: dict = {}
    injector = _Injector()
    z = traj1.latents[k].copy()
    for i in range(k, steps):
        step_idx = i - k
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < steps else 0
        net.forward(traj1.latents[i], t, ctx1,
                    pass_ctx=PassContext(step=step_idx, role="source", recorder=rec1))
        net.forward(traj2.latents[i], t, ctx2,
                    pass_ctx=PassContext(step=step_idx, role="source", recorder=rec2))

        injector.fused = {}
        if step_idx < n_cross:
            s = schedule_ratio(cfg_res, step_idx)
            for key, m1 in rec1.maps.items():
                if key[0] != step_idx or key[3] != "cross":
                    continue
                m2 = rec2.maps[key]
                out = np.array(m1, dtype=np.float64, copy=True)
                if sel1:
                    out[..., list(sel1)] = s * m1[..., list(sel1)]
                if sel2:
                    out[..., list(sel2)] = (1.0 - s) * m2[..., list(sel2)]
                injector.fused[key] = out.astype(m1.dtype)
        fused_store.update(injector.fused)

        if injector.fused:
            pc = PassContext(step=step_idx, role="target", hook=injector)
            eps_c = net.forward(z, t, fused_ctx, pass_ctx=pc)
        else:
            eps_c = net.forward(z, t, fused_ctx)
        if w == 1.0:
            eps = eps_c
        elif w == 0.0:
            eps = net.forward(z, t, null)
        else:
            eps_u = net.forward(z, t, null)
            eps = w * eps_c + (1.0 - w) * eps_u
        z = ddpm_step(z, eps, t, sched, traj1.noises[i], t_prev)
        check_finite(z, f"refused latent at denoising step {step_idx}")

    if single:
        z = z[0]
    return EditResult(latent=z, spectrogram=to_spectrogram(z),
                      source_record=rec1, target_record=rec2,
                      fused_maps=fused_store, config=cfg_res, guidance=w,
                      trajectory=traj1)
