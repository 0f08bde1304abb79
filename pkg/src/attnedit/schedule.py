"""Discrete noise schedule, forward noising, and the DDIM/DDPM update rules.

Timesteps are indexed 1..T with alpha_bar[0] = 1. Strided inference plans pair
each timestep with the next plan timestep; the DDPM posterior for the final
transition (t_prev = 0) floors alpha_bar at its t=1 value so the stochastic
update keeps a nonzero sigma, matching common latent-diffusion practice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray       # (T+1,), index 0 unused (0.0)
    alphas: np.ndarray      # (T+1,), index 0 = 1.0
    alpha_bars: np.ndarray  # (T+1,), index 0 = 1.0


def make_schedule(T: int = 1000, beta_min: float = 1e-4,
                  beta_max: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigError("need 0 < beta_min < beta_max < 1")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class InferencePlan:
    steps: int = 100
    sampler: str = "ddpm"
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("plan needs at least one step")
        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")

    def timesteps(self, sched: NoiseSchedule) -> np.ndarray:
        """Strictly decreasing timesteps by uniform stride, ending above 0."""
        if self.steps > sched.T:
            raise ConfigError("more inference steps than training timesteps")
        stride = sched.T // self.steps
        ts = sched.T - stride * np.arange(self.steps)
        return ts.astype(np.int64)


def _abar(sched: NoiseSchedule, t) -> np.ndarray:
    return sched.alpha_bars[np.asarray(t)]


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ConfigError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = np.asarray(t)
    if t.min() < 1 or t.max() > sched.T:
        raise ConfigError("t outside [1, T]")
    ab = _abar(sched, t)
    if t.ndim == 1:  # per-item timestep for a batch
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One DDIM update from level t to t_prev (t > t_prev >= 0)."""
    if not t > t_prev >= 0:
        raise ConfigError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if eta == 0.0:
        return np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * eps_hat
    sigma = eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)
    out = np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p - sigma**2) * eps_hat
    if noise is None:
        raise ConfigError("eta > 0 requires an explicit noise array")
    return out + sigma * noise


def ddpm_posterior(z_t: np.ndarray, eps_hat: np.ndarray, t: int,
                   sched: NoiseSchedule, t_prev: int | None = None):
    """Posterior mean and sigma for the (possibly strided) DDPM transition.

    Shared by the sampler and the inversion so replay is bitwise identical.
    """
    if t_prev is None:
        t_prev = t - 1
    if not t > t_prev >= 0:
        raise ConfigError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    ab_t = sched.alpha_bars[t]
    # final-transition floor: keep the last stochastic step non-degenerate
    ab_p = sched.alpha_bars[t_prev] if t_prev >= 1 else sched.alpha_bars[1]
    var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
    var = max(float(var), 0.0)
    sigma = float(np.sqrt(var))
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    mean = np.sqrt(ab_p) * x0 + np.sqrt(max(1.0 - ab_p - var, 0.0)) * eps_hat
    return mean, sigma


def ddpm_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
              noise: np.ndarray, t_prev: int | None = None) -> np.ndarray:
    """One stochastic DDPM update with explicitly supplied noise."""
    if noise.shape != z_t.shape:
        raise ConfigError(f"noise shape {noise.shape} != z shape {z_t.shape}")
    mean, sigma = ddpm_posterior(z_t, eps_hat, t, sched, t_prev)
    return mean + sigma * noise


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x
