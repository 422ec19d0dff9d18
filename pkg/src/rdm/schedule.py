"""Fixed variance schedules and the derived cumulative quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["NoiseSchedule", "linear_schedule", "ddim_subschedule"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances with 1-based step indexing.

    Arrays are stored with a leading entry for step 0 so that ``alpha_bars[t]``
    reads naturally; ``alpha_bars[0] == 1`` makes diffusing to step 0 the
    identity.  ``betas[0]`` is a 0.0 placeholder and never used.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigmas: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas, beta_start: float | None = None,
                   beta_end: float | None = None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d array")
        if not ((betas > 0).all() and (betas < 1).all()):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        full = np.concatenate([[0.0], betas])
        alphas = 1.0 - full
        alpha_bars = np.cumprod(alphas)
        sigmas = np.sqrt(full)
        for arr in (full, alphas, alpha_bars, sigmas):
            arr.setflags(write=False)
        return cls(full, alphas, alpha_bars, sigmas,
                   float(betas[0] if beta_start is None else beta_start),
                   float(betas[-1] if beta_end is None else beta_end))

    def snr(self, t: int) -> float:
        ab = self.alpha_bars[t]
        return ab / (1.0 - ab)


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64)
        betas = beta_start + (beta_end - beta_start) * steps / (T - 1)
    return NoiseSchedule.from_betas(betas, beta_start, beta_end)


def ddim_subschedule(schedule: NoiseSchedule | int, n_steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing step indices from T down to 1."""
    T = schedule if isinstance(schedule, int) else schedule.T
    if int(n_steps) != n_steps or not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be an integer in [1, {T}], got {n_steps}")
    n_steps = int(n_steps)
    if n_steps == 1:
        return [T]
    # spacing (T-1)/(n-1) >= 1, so rounding never produces duplicates;
    # halves round toward the larger index
    return [int(np.floor(T - k * (T - 1) / (n_steps - 1) + 0.5)) for k in range(n_steps)]
