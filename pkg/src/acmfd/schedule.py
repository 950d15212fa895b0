"""DDPM noise schedule: beta_t, alpha_t, their running product, and the
posterior variance scale beta_hat_t of the reverse chain."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by the 1-based step t; index 0 holds the t=0
    boundary values (alpha_hat[0] = 1, so beta_hat[1] = 0).

    beta[t]      noise level added at step t
    alpha[t]     1 - beta[t]
    alpha_hat[t] prod_{j<=t} alpha[j]
    beta_hat[t]  (1 - alpha_hat[t-1]) / (1 - alpha_hat[t]) * beta[t]
    """

    num_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_hat: np.ndarray
    beta_hat: np.ndarray

    def __post_init__(self):
        t = self.num_steps
        for name in ("beta", "alpha", "alpha_hat", "beta_hat"):
            arr = getattr(self, name)
            if arr.shape != (t + 1,):
                raise ValueError(f"{name} must have shape ({t + 1},), got {arr.shape}")
        if not np.all((self.beta[1:] > 0) & (self.beta[1:] < 1)):
            raise ValueError("beta_t must lie in (0, 1)")
        if self.alpha_hat[0] != 1.0:
            raise ValueError("alpha_hat[0] must be 1")
        if not np.all(np.diff(self.alpha_hat) < 0):
            raise ValueError("alpha_hat must be strictly decreasing")


def linear_schedule(num_steps: int = DEFAULT_T,
                    beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly interpolated beta schedule, endpoints inclusive."""
    if num_steps < 1:
        raise ValueError(f"need at least one step, got {num_steps}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.zeros(num_steps + 1)
    beta[1:] = np.linspace(beta_start, beta_end, num_steps)
    alpha = 1.0 - beta
    alpha[0] = 1.0
    alpha_hat = np.cumprod(alpha)
    beta_hat = np.zeros(num_steps + 1)
    beta_hat[1:] = (1.0 - alpha_hat[:-1]) / (1.0 - alpha_hat[1:]) * beta[1:]
    if alpha_hat[-1] > 1e-2:
        warnings.warn(
            f"alpha_hat at the final step is {alpha_hat[-1]:.3g} > 1e-2; the "
            "terminal state is far from pure noise (raise beta_end or T)",
            stacklevel=2,
        )
    return NoiseSchedule(num_steps=num_steps, beta=beta, alpha=alpha,
                         alpha_hat=alpha_hat, beta_hat=beta_hat)


def rescaled_linear_schedule(num_steps: int,
                             reference_steps: int = DEFAULT_T,
                             beta_start: float = DEFAULT_BETA_START,
                             beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear schedule with the beta range scaled by reference_steps/num_steps,
    keeping the total amount of noise roughly fixed when shortening T."""
    scale = reference_steps / num_steps
    return linear_schedule(num_steps, beta_start * scale, min(beta_end * scale, 0.999))
