"""Classifier-free guided sampling with attention recording and hook pass-through."""

from __future__ import annotations

import numpy as np

from .attention import AttentionRecord, PassContext
from .net import EpsilonNet
from .rng import rng_for
from .schedule import InferencePlan, NoiseSchedule, check_finite, ddim_step, ddpm_step


def cfg_epsilon(net: EpsilonNet, z, t, cond, null, w: float,
                pass_ctx: PassContext | None = None) -> np.ndarray:
    """Guided prediction w * eps(cond) + (1 - w) * eps(null).

    The conditional pass is skipped at w = 0 unless a hook/recorder needs it;
    the unconditional pass is skipped at w = 1. Hooks and recording apply to
    the conditional pass only.
    """
    need_cond = (w != 0.0) or pass_ctx is not None
    need_null = w != 1.0
    eps_c = net.forward(z, t, cond, pass_ctx=pass_ctx) if need_cond else None
    eps_u = net.forward(z, t, null) if need_null else None
    if not need_null:
        return eps_c
    if w == 0.0:
        return eps_u
    if w == 1.0:
        return eps_c
    return w * eps_c + (1.0 - w) * eps_u


def sample(net: EpsilonNet, cond: np.ndarray, null: np.ndarray, plan: InferencePlan,
           sched: NoiseSchedule, w: float, seed: int, hook=None, n: int = 1,
           record: bool = True, record_self: bool = False):
    """Generate from pure noise; returns (latent, AttentionRecord).

    With n > 1 the batch shares the timestep loop and the returned latent is
    (n, F, T); recording is usually disabled for large batches.
    """
    timesteps = plan.timesteps(sched)
    rng = rng_for("sample", seed)
    shape = (n, net.freq_bins, net.frames)
    z = rng.standard_normal(shape)
    recorder = AttentionRecord() if record else None
    for i, t in enumerate(timesteps):
        t_prev = int(timesteps[i + 1]) if i + 1 < len(timesteps) else 0
        pc = None
        if recorder is not None or hook is not None:
            pc = PassContext(step=i, role="target", hook=hook, recorder=recorder,
                             record_self=record_self)
        eps = cfg_epsilon(net, z, int(t), cond, null, w, pc)
        if plan.sampler == "ddim":
            noise = rng.standard_normal(shape) if plan.eta > 0 else None
            z = ddim_step(z, eps, int(t), t_prev, sched, plan.eta, noise)
        else:
            z = ddpm_step(z, eps, int(t), sched, rng.standard_normal(shape), t_prev)
        check_finite(z, f"sampled latent at step {i}")
    out = z[0] if n == 1 else z
    return out, recorder


# Fixed affine latent map: sparse [0, 1] spectrograms carry so little variance
# that noise prediction ignores them; centering the background at -1 gives the
# latent unit scale. The map is invertible and editing math never sees it.
def encode_spectrogram(spec: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(spec, dtype=np.float64) - 1.0


def to_spectrogram(latent: np.ndarray) -> np.ndarray:
    """Decode a latent back onto the valid (non-negative) spectrogram range."""
    return np.clip((latent + 1.0) / 2.0, 0.0, None)
