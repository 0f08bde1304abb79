"""Three routes into the model's noise space: plain DDIM inversion, null-text
inversion (per-step optimized unconditional embeddings), and edit-friendly
DDPM inversion whose stored per-step noises replay the input exactly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import PassContext
from .errors import ConfigError, NumericError
from .fileio import load_tensors, save_tensors
from .net import EpsilonNet
from .rng import rng_for
from .sampling import cfg_epsilon
from .schedule import (
    InferencePlan,
    NoiseSchedule,
    check_finite,
    ddim_step,
    ddpm_posterior,
    ddpm_step,
)


@dataclass
class LatentTrajectory:
    """Stored per-step latents (and noise vectors / null embeddings) from an
    inversion, aligned to the inference plan's descending timesteps.

    ``latents`` has steps+1 entries: index 0 is the deepest latent, the last
    entry is the (reconstructed) clean latent. All arrays carry a batch axis.
    """

    kind: str  # "ddim" or "ddpm_edit_friendly"
    timesteps: np.ndarray
    latents: np.ndarray            # (steps+1, B, F, T)
    noises: np.ndarray | None      # (steps, B, F, T), edit-friendly only
    null_embeddings: np.ndarray | None  # (steps, B, L, d), null-text only
    inversion_w: float

    @property
    def steps(self) -> int:
        return len(self.timesteps)

    @property
    def batch(self) -> int:
        return self.latents.shape[1]

    def item(self, b: int) -> "LatentTrajectory":
        return LatentTrajectory(
            kind=self.kind,
            timesteps=self.timesteps,
            latents=self.latents[:, b : b + 1],
            noises=None if self.noises is None else self.noises[:, b : b + 1],
            null_embeddings=(None if self.null_embeddings is None
                             else self.null_embeddings[:, b : b + 1]),
            inversion_w=self.inversion_w,
        )


def _as_batch(x0: np.ndarray):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        return x0[None], True
    return x0, False


def ddim_invert(x0: np.ndarray, cond: np.ndarray, null: np.ndarray,
                plan: InferencePlan, sched: NoiseSchedule, net: EpsilonNet,
                w: float = 0.0) -> LatentTrajectory:
    """Run the DDIM update in reverse, storing every intermediate latent."""
    if plan.sampler != "ddim" or plan.eta != 0.0:
        raise ConfigError("ddim_invert needs a deterministic ddim plan")
    x0, _ = _as_batch(x0)
    ts = plan.timesteps(sched)
    steps = len(ts)
    latents = np.empty((steps + 1,) + x0.shape)
    latents[steps] = x0
    z = x0
    for i in range(steps - 1, -1, -1):
        t_dest = int(ts[i])
        t_src = int(ts[i + 1]) if i + 1 < steps else 0
        eps = cfg_epsilon(net, z, t_dest, cond, null, w)
        ab_src = sched.alpha_bars[t_src]
        ab_dst = sched.alpha_bars[t_dest]
        x0_pred = (z - np.sqrt(1.0 - ab_src) * eps) / np.sqrt(ab_src)
        z = np.sqrt(ab_dst) * x0_pred + np.sqrt(1.0 - ab_dst) * eps
        check_finite(z, f"ddim inversion at t={t_dest}")
        latents[i] = z
    return LatentTrajectory(kind="ddim", timesteps=ts, latents=latents,
                            noises=None, null_embeddings=None, inversion_w=w)


def edit_friendly_invert(x0: np.ndarray, cond: np.ndarray, null: np.ndarray,
                         plan: InferencePlan, sched: NoiseSchedule,
                         net: EpsilonNet, seed: int,
                         w: float = 0.0) -> LatentTrajectory:
    """Forward-noise every level independently, then extract the per-step
    noise vectors that make the stochastic replay reconstruct x0 exactly."""
    if plan.sampler != "ddpm":
        raise ConfigError("edit_friendly_invert needs a ddpm plan")
    x0, _ = _as_batch(x0)
    ts = plan.timesteps(sched)
    steps = len(ts)
    rng = rng_for("edit-friendly", seed)
    latents = np.empty((steps + 1,) + x0.shape)
    latents[steps] = x0
    for i in range(steps):
        from .schedule import q_sample

        latents[i] = q_sample(x0, int(ts[i]), rng.standard_normal(x0.shape), sched)
    noises = np.empty((steps,) + x0.shape)
    for i in range(steps):
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < steps else 0
        eps_hat = cfg_epsilon(net, latents[i], t, cond, null, w)
        mu, sigma = ddpm_posterior(latents[i], eps_hat, t, sched, t_prev)
        if sigma == 0.0:
            raise NumericError(f"degenerate schedule: sigma = 0 at t={t}")
        noises[i] = (latents[i + 1] - mu) / sigma
        latents[i + 1] = mu + sigma * noises[i]  # reassign: replay is now exact
    return LatentTrajectory(kind="ddpm_edit_friendly", timesteps=ts,
                            latents=latents, noises=noises,
                            null_embeddings=None, inversion_w=w)


def null_text_invert(x0: np.ndarray, cond: np.ndarray, null: np.ndarray,
                     plan: InferencePlan, sched: NoiseSchedule, net: EpsilonNet,
                     w_edit: float = 7.5, inner_steps: int = 10,
                     lr: float = 1e-2) -> LatentTrajectory:
    """Pivot DDIM inversion at w=1, then per timestep optimize the null
    embedding so the guided step lands on the pivot trajectory.

    Gradient descent with a fixed step; the best-objective iterate is kept,
    so the per-step objective never ends above its initial value.
    """
    if plan.sampler != "ddim" or plan.eta != 0.0:
        raise ConfigError("null_text_invert needs a deterministic ddim plan")
    if inner_steps < 0:
        raise ConfigError("inner_steps must be >= 0")
    x0, _ = _as_batch(x0)
    pivot = ddim_invert(x0, cond, null, plan, sched, net, w=1.0)
    ts = pivot.timesteps
    steps = len(ts)
    b = x0.shape[0]
    cond_b = np.broadcast_to(np.asarray(cond, dtype=np.float64),
                             (b,) + np.asarray(cond).shape[-2:])
    null_t = np.broadcast_to(np.asarray(null, dtype=np.float64),
                             (b,) + np.asarray(null).shape[-2:]).copy()

    latents = np.empty_like(pivot.latents)
    latents[0] = pivot.latents[0]
    nulls = np.empty((steps, b) + null_t.shape[-2:])
    z = latents[0]
    cell_count = x0.shape[-2] * x0.shape[-1]
    for i in range(steps):
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < steps else 0
        target = pivot.latents[i + 1]
        ab_t = sched.alpha_bars[t]
        ab_p = sched.alpha_bars[t_prev]
        # d z_prev / d eps_hat for the deterministic DDIM step
        c_dir = float(np.sqrt(1.0 - ab_p) - np.sqrt(ab_p * (1.0 - ab_t) / ab_t))
        eps_c = net.forward(z, t, cond_b)

        def objective(null_now):
            eps_u, cache = net.forward(z, t, null_now, want_cache=True)
            eps = w_edit * eps_c + (1.0 - w_edit) * eps_u
            z_prev = ddim_step(z, eps, t, t_prev, sched)
            resid = z_prev - target
            obj = np.mean(resid * resid, axis=(-2, -1))
            return obj, resid, cache

        best_obj, _, _ = objective(null_t)
        best_null = null_t.copy()
        for _ in range(inner_steps):
            obj, resid, cache = objective(null_t)
            if not np.all(np.isfinite(obj)):
                raise NumericError(f"null-text objective non-finite at t={t}")
            g_eps_u = (2.0 / cell_count) * resid * c_dir * (1.0 - w_edit)
            _, _, gctx = net.backward(g_eps_u, cache)
            null_t = null_t - lr * np.asarray(gctx, dtype=np.float64)
            obj_new, _, _ = objective(null_t)
            improved = obj_new < best_obj
            best_obj = np.where(improved, obj_new, best_obj)
            best_null[improved] = null_t[improved]
        null_t = best_null.copy()
        nulls[i] = null_t
        eps_u = net.forward(z, t, null_t)
        eps = w_edit * eps_c + (1.0 - w_edit) * eps_u
        z = ddim_step(z, eps, t, t_prev, sched)
        check_finite(z, f"null-text trajectory at t={t}")
        latents[i + 1] = z
    return LatentTrajectory(kind="ddim", timesteps=ts, latents=latents,
                            noises=None, null_embeddings=nulls,
                            inversion_w=w_edit)


def reconstruct(traj: LatentTrajectory, cond: np.ndarray, null: np.ndarray,
                plan: InferencePlan, sched: NoiseSchedule, net: EpsilonNet,
                w: float | None = None, hook=None, from_step: int = 0,
                recorder=None, record_self: bool = False) -> np.ndarray:
    """Deterministic replay of a trajectory from ``from_step``; with no hook
    and matching parameters this meets the per-kind reconstruction bounds."""
    ts = traj.timesteps
    steps = len(ts)
    if traj.kind == "ddpm_edit_friendly" and plan.sampler != "ddpm":
        raise ConfigError("trajectory kind does not match plan sampler")
    if traj.kind == "ddim" and plan.sampler != "ddim":
        raise ConfigError("trajectory kind does not match plan sampler")
    if not 0 <= from_step < steps:
        raise ConfigError(f"from_step {from_step} outside [0, {steps})")
    if w is None:
        w = traj.inversion_w
    z = traj.latents[from_step]
    b = z.shape[0]
    for i in range(from_step, steps):
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < steps else 0
        pc = None
        if hook is not None or recorder is not None:
            pc = PassContext(step=i, role="source", hook=hook, recorder=recorder,
                             record_self=record_self)
        if traj.null_embeddings is not None:
            null_i = traj.null_embeddings[i]
        else:
            null_i = null
        eps = cfg_epsilon(net, z, t, cond, null_i, w, pc)
        if traj.kind == "ddpm_edit_friendly":
            z = ddpm_step(z, eps, t, sched, traj.noises[i], t_prev)
        else:
            z = ddim_step(z, eps, t, t_prev, sched)
    return z


# ----------------------------------------------------------------------
_KIND_IDS = {"ddim": 0.0, "ddpm_edit_friendly": 1.0}


def save_trajectory(path, traj: LatentTrajectory) -> None:
    tensors = {
        "meta": np.array([_KIND_IDS[traj.kind], traj.inversion_w, traj.steps,
                          traj.batch]),
        "timesteps": traj.timesteps.astype(np.float64),
    }
    for i in range(traj.steps + 1):
        tensors[f"latent.{i:04d}"] = traj.latents[i]
    if traj.noises is not None:
        for i in range(traj.steps):
            tensors[f"noise.{i:04d}"] = traj.noises[i]
    if traj.null_embeddings is not None:
        for i in range(traj.steps):
            tensors[f"null.{i:04d}"] = traj.null_embeddings[i]
    save_tensors(path, tensors)


def load_trajectory(path) -> LatentTrajectory:
    tensors = load_tensors(path)
    kind_id, w, steps, batch = (float(v) for v in tensors["meta"])
    steps = int(steps)
    kind = next(k for k, v in _KIND_IDS.items() if v == kind_id)
    latents = np.stack([np.asarray(tensors[f"latent.{i:04d}"], dtype=np.float64)
                        for i in range(steps + 1)])
    noises = None
    if "noise.0000" in tensors:
        noises = np.stack([np.asarray(tensors[f"noise.{i:04d}"], dtype=np.float64)
                           for i in range(steps)])
    nulls = None
    if "null.0000" in tensors:
        nulls = np.stack([np.asarray(tensors[f"null.{i:04d}"], dtype=np.float64)
                          for i in range(steps)])
    return LatentTrajectory(kind=kind, timesteps=tensors["timesteps"].astype(np.int64),
                            latents=latents, noises=noises, null_embeddings=nulls,
                            inversion_w=w)
