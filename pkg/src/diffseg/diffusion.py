"""Noise schedule, forward corruption and reverse posterior for mask diffusion.

Step indices run from 1 to N. Every table is stored with index ``t - 1`` and
``alpha_bar_prev`` carries the convention that the cumulative product before
the first step is 1.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

# clean masks: background -> -1, fruit -> +1
MASK_RANGE = (-1.0, 1.0)

StepIndex = Union[int, torch.Tensor]
DenoiserFn = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class DiffusionTensorSpec:
    height: int
    width: int
    channels: int = 1
    value_range: tuple = MASK_RANGE

    def __post_init__(self):
        lo, hi = self.value_range
        if lo != -hi:
            raise ValueError(f"value range must be symmetric about 0, got {self.value_range}")

    @property
    def shape(self):
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables of a discrete variance-preserving diffusion.

    ``betas`` is the variance added at each step; ``alphas = 1 - betas``;
    ``alpha_bars`` the running product of ``alphas``; ``sigmas = sqrt(betas)``.
    Instances are immutable and can be shared between workers.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    alpha_bars_prev: np.ndarray = field(init=False)
    one_minus_alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.empty_like(alphas)
        # 1 - abar_t by recurrence: exact at t=1 and free of cancellation
        one_minus = np.empty_like(alphas)
        acc, comp = 1.0, 0.0
        for i, (a, b) in enumerate(zip(alphas, betas)):
            comp = comp + acc * b
            acc = acc * a
            alpha_bars[i] = acc
            one_minus[i] = comp
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        tables = dict(
            betas=betas,
            alphas=alphas,
            alpha_bars=alpha_bars,
            alpha_bars_prev=alpha_bars_prev,
            one_minus_alpha_bars=one_minus,
            sigmas=np.sqrt(betas),
        )
        for name, value in tables.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step ``t``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def check_step(self, t: StepIndex):
        if isinstance(t, torch.Tensor):
            if t.numel() == 0:
                return
            lo, hi = int(t.min()), int(t.max())
        else:
            lo = hi = int(t)
        if lo < 1 or hi > self.num_steps:
            raise ValueError(f"step index out of range 1..{self.num_steps}: {lo}..{hi}")

    def metadata(self) -> dict:
        return {"kind": "explicit", "betas": self.betas.tolist()}

    @classmethod
    def from_metadata(cls, meta: dict) -> "NoiseSchedule":
        if meta.get("kind") == "linear":
            return make_linear_schedule(meta["num_steps"], meta["beta_start"], meta["beta_end"])
        return cls(np.asarray(meta["betas"], dtype=np.float64))


@dataclass(frozen=True)
class LinearNoiseSchedule(NoiseSchedule):
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def metadata(self) -> dict:
        return {
            "kind": "linear",
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def make_linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(num_steps), dtype=np.float64)
    return LinearNoiseSchedule(betas, beta_start=float(beta_start), beta_end=float(beta_end))


def _gather(table: np.ndarray, t: StepIndex, like: torch.Tensor) -> torch.Tensor:
    """Look up ``table[t - 1]`` shaped to broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.long().cpu().numpy() - 1
        values = torch.as_tensor(table[idx], dtype=like.dtype, device=like.device)
        return values.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(table[int(t) - 1], dtype=like.dtype, device=like.device)


def q_sample(x0: torch.Tensor, t: StepIndex, noise: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Jump straight to step ``t`` of the forward chain.

    ``x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise``, which has the
    same law as applying the single-step transition ``t`` times.
    """
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != noise shape {tuple(noise.shape)}")
    schedule.check_step(t)
    abar = _gather(schedule.alpha_bars, t, x0)
    one_minus = _gather(schedule.one_minus_alpha_bars, t, x0)
    return abar.sqrt() * x0 + one_minus.sqrt() * noise


def posterior_coefficients(t: StepIndex, schedule: NoiseSchedule, like: torch.Tensor):
    """Coefficients ``(c_x0, c_xt, variance)`` of q(x_{t-1} | x_t, x0)."""
    schedule.check_step(t)
    beta = _gather(schedule.betas, t, like)
    alpha = _gather(schedule.alphas, t, like)
    abar_prev = _gather(schedule.alpha_bars_prev, t, like)
    one_minus = _gather(schedule.one_minus_alpha_bars, t, like)
    one_minus_prev = _gather(np.concatenate([[0.0], schedule.one_minus_alpha_bars[:-1]]), t, like)
    c_x0 = abar_prev.sqrt() * beta / one_minus
    c_xt = alpha.sqrt() * one_minus_prev / one_minus
    variance = one_minus_prev / one_minus * beta
    return c_x0, c_xt, variance


def posterior_params(x0: torch.Tensor, xt: torch.Tensor, t: StepIndex,
                     schedule: NoiseSchedule):
    """Mean and variance of the Gaussian reverse posterior q(x_{t-1} | x_t, x0).

    The second mean coefficient uses ``sqrt(alpha_t)`` (single-step retention),
    not the cumulative ``sqrt(alpha_bar_t)``. At ``t == 1`` the posterior
    collapses: mean equals ``x0`` and variance is 0.
    """
    if x0.shape != xt.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != xt shape {tuple(xt.shape)}")
    c_x0, c_xt, variance = posterior_coefficients(t, schedule, x0)
    mean = c_x0 * x0 + c_xt * xt
    if not isinstance(t, torch.Tensor) or t.ndim == 0:
        variance = float(variance)
    return mean, variance


def denoising_loss(denoiser: DenoiserFn, x0: torch.Tensor, y: Optional[torch.Tensor],
                   pyramid, t: StepIndex, noise: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the denoiser's clean-mask estimate and ``x0``.

    ``denoiser`` is called as ``denoiser(xt, t, y, pyramid)``.
    """
    xt = q_sample(x0, t, noise, schedule)
    pred = denoiser(xt, t, y, pyramid)
    if pred.shape != x0.shape:
        raise ValueError(f"denoiser returned shape {tuple(pred.shape)}, expected {tuple(x0.shape)}")
    return F.mse_loss(pred, x0, reduction="mean")
