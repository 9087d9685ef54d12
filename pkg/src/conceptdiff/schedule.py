"""Diffusion noise schedule, forward noising, and ancestral reverse steps.

The schedule stores cumulative retention coefficients alpha[0..T] (alpha[0]
= 1) and per-step reverse standard deviations sigma[1..T]. Everything here
is a pure function of its inputs; callers own the random draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule over T discrete steps.

    alphas[t] is the cumulative retention Π_{s<=t}(1-beta_s), strictly
    decreasing with alphas[0] = 1. sigmas[t] (valid for t in 1..T) is the
    reverse-step standard deviation: the forward posterior std, with the
    degenerate t=1 entry replaced by the t=2 value so that sigma_t > 0
    everywhere.
    """

    num_steps: int
    betas: Array  # betas[t], t in 1..T; betas[0] unused (0.0)
    alphas: Array  # cumulative, indexed 0..T
    sigmas: Array  # indexed 0..T, entry 0 unused (0.0)

    def __post_init__(self):
        T = self.num_steps
        if T < 2:
            raise ValueError(f"schedule needs at least 2 steps, got {T}")
        if self.alphas.shape != (T + 1,) or self.sigmas.shape != (T + 1,):
            raise ValueError("alphas/sigmas must be indexed 0..T")
        if self.alphas[0] != 1.0:
            raise ValueError("alpha_0 must be 1")
        if not np.all(np.diff(self.alphas) < 0):
            raise ValueError("alpha_t must be strictly decreasing")
        if not np.all(self.sigmas[1:] > 0):
            raise ValueError("sigma_t must be positive for t in 1..T")

    @property
    def terminal_snr(self) -> float:
        """Signal-to-noise ratio sqrt(alpha_T) / sqrt(1 - alpha_T) at t = T."""
        a = self.alphas[self.num_steps]
        return math.sqrt(a) / math.sqrt(1.0 - a)

    def validate_for_training(self) -> None:
        """Terminal state must be near-Gaussian before the schedule drives a
        diffusion run; short hand-check schedules are exempt until then."""
        if self.terminal_snr >= 0.05:
            raise ValueError(
                f"terminal signal-to-noise ratio {self.terminal_snr:.4f} >= 0.05; "
                "increase T or the beta range"
            )

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} out of range 1..{self.num_steps}")
        return t

    def posterior_std(self, t: int) -> float:
        """True forward-posterior std sqrt(beta~_t); zero at t = 1."""
        t = self.check_t(t)
        var = (1.0 - self.alphas[t - 1]) / (1.0 - self.alphas[t]) * self.betas[t]
        return math.sqrt(var)

    def posterior_mean(self, x0: Array, xt: Array, t: int) -> Array:
        """Mean of the forward posterior q(x_{t-1} | x_t, x_0)."""
        t = self.check_t(t)
        a_t, a_prev = self.alphas[t], self.alphas[t - 1]
        beta_t = self.betas[t]
        coef0 = math.sqrt(a_prev) * beta_t / (1.0 - a_t)
        coeft = math.sqrt(1.0 - beta_t) * (1.0 - a_prev) / (1.0 - a_t)
        return coef0 * x0 + coeft * xt


@dataclass(frozen=True)
class StateVector:
    """A d-dimensional state at a diffusion timestep (0 = clean data)."""

    values: Array
    timestep: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise ValueError("StateVector holds a single flat vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("StateVector values must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.2) -> NoiseSchedule:
    """Linear-beta schedule: beta linearly spaced over T steps, alphas the
    running product of (1-beta), sigmas the DDPM posterior std (t=1 entry
    clipped to the t=2 value)."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas[1:])])
    post_var = np.zeros(T + 1)
    post_var[1:] = (1.0 - alphas[:-1]) / (1.0 - alphas[1:]) * betas[1:]
    post_var[1] = post_var[2]
    sigmas = np.sqrt(post_var)
    return NoiseSchedule(num_steps=T, betas=betas, alphas=alphas, sigmas=sigmas)


def add_noise(x0: StateVector, eps: StateVector, t: int, s: NoiseSchedule) -> StateVector:
    """Forward noising: sqrt(alpha_t) x0 + sqrt(1-alpha_t) eps.

    t = 0 is allowed as a testing boundary (alpha_0 = 1, returns x0).
    """
    t = int(t)
    if not 0 <= t <= s.num_steps:
        raise ValueError(f"timestep {t} out of range 0..{s.num_steps}")
    if x0.dim != eps.dim:
        raise ValueError("x0 and eps dimensions differ")
    a = s.alphas[t]
    values = math.sqrt(a) * x0.values + math.sqrt(1.0 - a) * eps.values
    return StateVector(values=values, timestep=t)


def ancestral_step(mean: StateVector, t: int, noise: StateVector, s: NoiseSchedule) -> StateVector:
    """One reverse step: mean + sigma_t * noise at timestep t-1.

    The final step (t = 1) is deterministic: the noise term is dropped.
    """
    t = s.check_t(t)
    if mean.dim != noise.dim:
        raise ValueError("mean and noise dimensions differ")
    sigma = 0.0 if t == 1 else s.sigmas[t]
    return StateVector(values=mean.values + sigma * noise.values, timestep=t - 1)


def gaussian_log_density(x, mean, sigma: float) -> float:
    """log N(x; mean, sigma^2 I), normalization constant included."""
    xv = x.values if isinstance(x, StateVector) else np.asarray(x, dtype=np.float64)
    mv = mean.values if isinstance(mean, StateVector) else np.asarray(mean, dtype=np.float64)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if xv.shape != mv.shape:
        raise ValueError("x and mean dimensions differ")
    d = xv.size
    sq = float(np.sum((xv - mv) ** 2))
    return -0.5 * d * math.log(2.0 * math.pi * sigma * sigma) - sq / (2.0 * sigma * sigma)
