"""Noise-prediction training: MSE objective with classifier-free dropout,
plain SGD with global gradient-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .layers import clip_grads_
from .net import EpsilonNet
from .rng import rng_for
from .schedule import NoiseSchedule, q_sample
from .world import World, random_event_spec
from .rng import seed_for


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batches_per_epoch: int = 100
    batch: int = 16
    lr: float = 0.04
    seed: int = 0
    p_uncond: float = 0.1
    clip_norm: float = 1.0


def training_loss(net: EpsilonNet, x0: np.ndarray, ctx: np.ndarray,
                  null: np.ndarray, sched: NoiseSchedule,
                  rng: np.random.Generator, p_uncond: float = 0.1):
    """Mean squared error between true and predicted noise over a batch.

    Timesteps are uniform on [1, T] per item; each item's conditioning is
    replaced by the null embedding with probability p_uncond. Returns
    (loss, parameter gradients).
    """
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    drop = rng.random(b) < p_uncond
    ctx = ctx.copy()
    ctx[drop] = null
    z = q_sample(x0, t, eps, sched)
    pred, cache = net.forward(z, t, ctx, want_cache=True)
    resid = np.asarray(pred, dtype=np.float64) - eps
    loss = float(np.mean(resid * resid))
    grads, _, _ = net.backward((2.0 / resid.size) * resid, cache)
    return loss, grads


def draw_training_scene(world: World, rng: np.random.Generator, tag):
    """One scene latent: a long single event, or two events on a disjoint
    time split; returns (encoded latent, prompt embedding)."""
    from dataclasses import replace

    from .sampling import encode_spectrogram

    cfg = world.config
    if rng.random() < 0.5:
        # long, bold singles anchor each kind's canonical appearance
        from .world import max_clean_duration

        e = random_event_spec(cfg, rng, intensity_range=(0.7, 1.0))
        duration = int(rng.integers(cfg.frames // 2, cfg.frames - 3))
        duration = min(duration, max_clean_duration(e.kind, e.pitch, cfg.freq_bins))
        onset = int(rng.integers(0, cfg.frames - duration + 1))
        events = [replace(e, duration=duration, onset=onset)]
    else:
        split = int(rng.integers(24, 41))
        events = [
            random_event_spec(cfg, rng, 0, split),
            random_event_spec(cfg, rng, split, cfg.frames),
        ]
    scene, tokens = world.compose_scene(events, seed_for("train-scene", *tag))
    return encode_spectrogram(scene), world.embed(tokens)


def train(net: EpsilonNet, world: World, sched: NoiseSchedule,
          config: TrainConfig | None = None, log_every: int = 50):
    """SGD training loop; returns the (step, loss) curve. Deterministic given
    config.seed; aborts with a diagnostic on divergence."""
    config = config or TrainConfig()
    rng = rng_for("train", config.seed)
    null = world.null_embedding()
    curve = []
    step = 0
    for epoch in range(config.epochs):
        for _ in range(config.batches_per_epoch):
            xs = np.empty((config.batch, world.config.freq_bins, world.config.frames))
            cs = np.empty((config.batch, world.config.max_tokens, world.config.embed_dim))
            for i in range(config.batch):
                xs[i], cs[i] = draw_training_scene(world, rng, (config.seed, step, i))
            loss, grads = training_loss(net, xs, cs, null, sched, rng,
                                        config.p_uncond)
            if not np.isfinite(loss):
                raise NumericError(
                    f"training diverged at step {step}: loss = {loss}"
                )
            clip_grads_(grads, config.clip_norm)
            for name, g in grads.items():
                net.params[name] -= (config.lr * g).astype(net.dtype)
            curve.append((step, loss))
            step += 1
    return curve
