"""Fusion-ratio schedulers: a time-varying weight blends source and target
attention maps across the denoising window."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigError

SCHEDULERS = ("binary", "linear", "exponential", "cosine_annealing")


@dataclass(frozen=True)
class FuserConfig:
    scheduler: str = "cosine_annealing"
    eta_min: float = 0.0
    eta_max: float = 1.0
    t_s: int = 0
    t_e: int | None = None  # None: resolved to the end of the cross-replace window
    cross_replace_frac: float = 0.8
    self_replace_frac: float = 0.0
    skip: int = 50
    extra_steps: int = 0  # regeneration steps appended after the guided window

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if not 0.0 <= self.cross_replace_frac <= 1.0:
            raise ConfigError("cross_replace_frac outside [0, 1]")
        if not 0.0 <= self.self_replace_frac <= 1.0:
            raise ConfigError("self_replace_frac outside [0, 1]")
        if not (math.isfinite(self.eta_min) and math.isfinite(self.eta_max)):
            raise ConfigError("eta bounds must be finite")
        if self.skip < 0 or self.extra_steps < 0:
            raise ConfigError("skip and extra_steps must be >= 0")
        if self.t_e is not None and not self.t_s < self.t_e:
            raise ConfigError("need t_s < t_e")

    def resolved(self, denoise_steps: int) -> "FuserConfig":
        """Fill the transition window end: fusion completes when cross-attention
        injection stops."""
        if denoise_steps < 1:
            raise ConfigError("skip leaves no denoising steps")
        if self.t_e is not None:
            return self
        n_cross = math.ceil(self.cross_replace_frac * denoise_steps)
        t_e = max(n_cross, self.t_s + 1)
        return replace(self, t_e=t_e)


def schedule_ratio(cfg: FuserConfig, t) -> float:
    """Fusion ratio at denoising-step index t (counted from the start of
    denoising): high plateau before the window, scheduler decay inside,
    low plateau from the window end on."""
    if cfg.t_e is None:
        raise ConfigError("t_e unresolved; call FuserConfig.resolved first")
    if t < cfg.t_s:
        return cfg.eta_max
    if t >= cfg.t_e:
        return cfg.eta_min
    window = cfg.t_e - cfg.t_s
    u = t - cfg.t_s
    if cfg.scheduler == "binary":
        return cfg.eta_min
    if cfg.scheduler == "linear":
        return cfg.eta_max - (u / window) * (cfg.eta_max - cfg.eta_min)
    if cfg.scheduler == "exponential":
        if cfg.eta_max == 0.0 or cfg.eta_min / cfg.eta_max <= 0.0:
            raise ConfigError(
                "exponential scheduler needs nonzero same-sign eta bounds"
            )
        r = (cfg.eta_min / cfg.eta_max) ** (1.0 / window)
        return cfg.eta_max * r**u
    # cosine annealing
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (
        1.0 + math.cos(math.pi * u / window)
    )
