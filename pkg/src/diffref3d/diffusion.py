"""Cosine noise schedule, forward noising and the DDIM reverse update."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .boxes import ConfigError

# incremented whenever a negative radicand is clamped to zero in ddim_step
diagnostics: Counter = Counter()


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    snr: float = 2.0
    clamp_bound: float = 3.0
    s: float = 0.008

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("diffusion.T must be >= 1")
        if self.snr <= 0:
            raise ConfigError("diffusion.snr must be > 0")
        if self.clamp_bound <= 0:
            raise ConfigError("diffusion.clamp_bound must be > 0")
        if self.s <= 0:
            raise ConfigError("diffusion.s must be > 0")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)


def build_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    if T < 1 or s <= 0:
        raise ConfigError(f"invalid schedule parameters T={T}, s={s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    alpha = 1.0 - beta
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, s=s, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t, schedule: NoiseSchedule, lo: int = 1):
    t_arr = np.asarray(t)
    if np.any(t_arr < lo) or np.any(t_arr > schedule.T):
        raise IndexError(f"timestep {t} outside [{lo}, {schedule.T}]")
    return t_arr.astype(np.int64)


def q_sample(x0, t, eps, schedule: NoiseSchedule, config: DiffusionConfig) -> np.ndarray:
    """Noisy residual at step ``t`` with noise shrunk by the SNR and clamped.

    ``t`` may be a scalar or one timestep per row of ``x0``.
    """
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar[t][..., None] if t.ndim else schedule.alpha_bar[t]
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * (eps / config.snr)
    return np.clip(xt, -config.clamp_bound, config.clamp_bound)


def ddim_sigma(t: int, t_prev: int, schedule: NoiseSchedule) -> float:
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    ratio = (1.0 - ab_p) / (1.0 - ab_t)
    return float(np.sqrt(max(ratio, 0.0)) * np.sqrt(max(1.0 - ab_t / ab_p, 0.0)))


def ddim_step(x_t, x0_hat, t: int, t_prev: int, eps_new, schedule: NoiseSchedule) -> np.ndarray:
    """One reverse update from ``t`` to ``t_prev`` given the predicted clean residual."""
    if not 0 <= t_prev < t <= schedule.T:
        raise IndexError(f"need 0 <= t_prev < t <= {schedule.T}, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    eps_pred = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    sigma = ddim_sigma(t, t_prev, schedule)
    radicand = 1.0 - ab_p - sigma**2
    if radicand < 0:
        diagnostics["ddim_negative_radicand"] += 1
        radicand = 0.0
    return x0_hat * np.sqrt(ab_p) + eps_pred * np.sqrt(radicand) + sigma * np.asarray(eps_new)


def make_timestep_sequence(T: int, steps: int) -> list[int]:
    if steps < 1 or steps > T:
        raise ConfigError(f"sampling steps must be in [1, {T}], got {steps}")
    if steps == 3 and T == 1000:
        return [1000, 500, 200]
    k = np.arange(steps)
    return [int(v) for v in np.floor(T * (1.0 - k / steps) + 0.5)]
