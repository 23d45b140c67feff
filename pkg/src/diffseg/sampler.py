"""Reverse-process samplers and whole-image segmentation.

Two samplers are provided:

* ``ancestral_sample`` walks every step N..1, drawing from the reverse
  posterior with the denoiser's clean-mask estimate plugged in.
* ``ode_sample`` integrates the probability-flow ODE with a second-order
  multistep exponential integrator in the clean-mask (x0) parameterisation,
  on a grid uniform in half log-SNR ``lambda = log(alpha) - log(sigma)``.

The discrete schedule is extended to fractional steps ``s`` in [1, N] by
linear interpolation of ``log sqrt(alpha_bar)``; step 0 is the clean end
(alpha = 1, sigma = 0).
"""

from dataclasses import dataclass
import time
from typing import Callable, Optional

import numpy as np
import torch

from .diffusion import MASK_RANGE, NoiseSchedule, posterior_params
from .features import FrozenBackbone, extract
from .patcher import split, stitch

ANCESTRAL = "ancestral"
ODE_SOLVER = "ode_solver"


@dataclass
class SamplerConfig:
    method: str = ODE_SOLVER
    num_steps: int = 5
    seed: Optional[int] = 0
    threshold: float = 0.0
    # clip intermediate clean-mask estimates to the mask value range
    clip_denoised: bool = True

    def validate(self, schedule: NoiseSchedule):
        if self.method not in (ANCESTRAL, ODE_SOLVER):
            raise ValueError(f"unknown sampling method {self.method!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        if self.num_steps > schedule.num_steps:
            raise ValueError(f"num_steps={self.num_steps} exceeds the schedule length {schedule.num_steps}")
        if self.seed is None:
            raise ValueError("a seed is required; sampling is never left unseeded")


def log_alpha(schedule: NoiseSchedule, s):
    """``log sqrt(alpha_bar)`` at fractional step(s) ``s`` in [0, N]."""
    grid = np.arange(schedule.num_steps + 1, dtype=np.float64)
    table = 0.5 * np.log(np.concatenate([[1.0], schedule.alpha_bars]))
    return np.interp(s, grid, table)


def alpha_bar_at(schedule: NoiseSchedule, s):
    return np.exp(2.0 * log_alpha(schedule, s))


def half_log_snr(schedule: NoiseSchedule, s):
    la = log_alpha(schedule, s)
    return la - 0.5 * np.log(-np.expm1(2.0 * la))


def step_from_lambda(schedule: NoiseSchedule, lam):
    """Inverse of :func:`half_log_snr` restricted to [1, N]."""
    target = -0.5 * np.logaddexp(0.0, -2.0 * np.asarray(lam, dtype=np.float64))
    grid = np.arange(1, schedule.num_steps + 1, dtype=np.float64)
    table = 0.5 * np.log(schedule.alpha_bars)
    # log alpha decreases with s; np.interp wants increasing abscissae
    return np.interp(target, table[::-1], grid[::-1])


def ode_time_grid(schedule: NoiseSchedule, num_steps: int):
    """Fractional steps visited by the ODE solver, ending with 0 (clean)."""
    lam_hi = half_log_snr(schedule, 1.0)
    lam_lo = half_log_snr(schedule, float(schedule.num_steps))
    if num_steps == 1:
        interior = np.array([float(schedule.num_steps)])
    else:
        lams = np.linspace(lam_lo, lam_hi, num_steps)
        interior = step_from_lambda(schedule, lams)
        interior[0], interior[-1] = float(schedule.num_steps), 1.0
    return np.concatenate([interior, [0.0]])


def _initial_noise(shape, config: SamplerConfig, dtype, device):
    gen = torch.Generator(device="cpu").manual_seed(int(config.seed))
    return torch.randn(shape, generator=gen, dtype=dtype).to(device), gen


def _mask_shape(y, shape):
    if shape is not None:
        return tuple(shape)
    if y is None:
        raise ValueError("pass `shape` when sampling without a condition image")
    return (y.shape[0], 1, *y.shape[-2:])


def _clip(x0, config):
    return x0.clamp(*MASK_RANGE) if config.clip_denoised else x0


@torch.no_grad()
def ancestral_sample(denoiser: Callable, y, pyramid, schedule: NoiseSchedule,
                     config: SamplerConfig, shape=None, dtype=torch.float32) -> torch.Tensor:
    """Stochastic reverse walk over every step N..1."""
    config.validate(schedule)
    dtype = y.dtype if y is not None else dtype
    device = y.device if y is not None else "cpu"
    x, gen = _initial_noise(_mask_shape(y, shape), config, dtype, device)
    for t in range(schedule.num_steps, 0, -1):
        x0 = _clip(denoiser(x, t, y, pyramid), config)
        mean, var = posterior_params(x0, x, t, schedule)
        if t > 1:
            z = torch.randn(x.shape, generator=gen, dtype=dtype).to(device)
            x = mean + var ** 0.5 * z
        else:
            x = mean
    return x


@torch.no_grad()
def ode_sample(denoiser: Callable, y, pyramid, schedule: NoiseSchedule,
               config: SamplerConfig, shape=None, dtype=torch.float32) -> torch.Tensor:
    """Deterministic few-step probability-flow ODE solve from step N to 0.

    Uses ``config.num_steps`` denoiser evaluations: a first-order step, then
    second-order multistep updates, and a final first-order step onto the clean
    end, where the result equals the last clean-mask estimate.
    """
    config.validate(schedule)
    dtype = y.dtype if y is not None else dtype
    device = y.device if y is not None else "cpu"
    x, _ = _initial_noise(_mask_shape(y, shape), config, dtype, device)

    steps = ode_time_grid(schedule, config.num_steps)
    lams = [float(half_log_snr(schedule, s)) for s in steps[:-1]]
    log_alphas = [float(log_alpha(schedule, s)) for s in steps[:-1]]

    prev_x0, prev_lam = None, None
    for i in range(config.num_steps):
        s = float(steps[i])
        x0 = _clip(denoiser(x, torch.tensor(s, dtype=dtype), y, pyramid), config)
        if i == config.num_steps - 1:
            x = x0
            break
        lam, lam_next = lams[i], lams[i + 1]
        la, la_next = log_alphas[i], log_alphas[i + 1]
        sigma = np.sqrt(-np.expm1(2 * la))
        sigma_next = np.sqrt(-np.expm1(2 * la_next))
        alpha_next = np.exp(la_next)
        h = lam_next - lam
        phi = np.expm1(-h)  # e^{-h} - 1
        x = (sigma_next / sigma) * x - alpha_next * phi * x0
        if prev_x0 is not None:
            r = (lam - prev_lam) / h
            x = x - 0.5 * alpha_next * phi * (x0 - prev_x0) / r
        prev_x0, prev_lam = x0, lam
    return x


def sample(denoiser, y, pyramid, schedule, config: SamplerConfig, shape=None):
    if config.method == ANCESTRAL:
        return ancestral_sample(denoiser, y, pyramid, schedule, config, shape=shape)
    return ode_sample(denoiser, y, pyramid, schedule, config, shape=shape)


@torch.no_grad()
def predict_patches(model, y: torch.Tensor, backbone: Optional[FrozenBackbone],
                    schedule: NoiseSchedule, config: SamplerConfig) -> torch.Tensor:
    """Continuous mask estimate in [-1, 1] for a batch of RGB patches (B x 3 x H x W)."""
    cfg = getattr(model, "config", None)
    pyramid = None
    if cfg is None:
        pyramid = extract(y, backbone) if backbone is not None else None
    elif cfg.use_mappers:
        if backbone is None:
            raise ValueError("this model needs a frozen backbone for its feature pyramid")
        pyramid = extract(y, backbone)
    if cfg is not None and not cfg.use_diffusion:
        # direct segmenter: logits -> [-1, 1], same sign convention as the masks
        return torch.tanh(0.5 * model(None, None, y, pyramid))
    out = sample(model, y, pyramid, schedule, config)
    return out.clamp(*MASK_RANGE)


@dataclass
class Segmentation:
    binary: np.ndarray  # H x W uint8 in {0, 1}
    continuous: np.ndarray  # H x W float32 in [-1, 1]
    seconds: float


def segment(model, image: np.ndarray, backbone: Optional[FrozenBackbone], schedule: NoiseSchedule,
            config: SamplerConfig, patch_size: int = 64, batch_size: int = 32) -> Segmentation:
    """Segment a full H x W x 3 image in [0, 1] patch by patch.

    All patches are sampled as one seeded batch (chunked by ``batch_size``),
    stitched, clamped to the mask range and thresholded.
    """
    config.validate(schedule)
    start = time.perf_counter()
    patches, grid = split(np.asarray(image, dtype=np.float32), patch_size)
    y = torch.from_numpy(np.stack(patches)).permute(0, 3, 1, 2).contiguous()
    outs = []
    for k, i in enumerate(range(0, len(patches), batch_size)):
        chunk_cfg = config if k == 0 else SamplerConfig(**{**config.__dict__, "seed": config.seed + k})
        outs.append(predict_patches(model, y[i:i + batch_size], backbone, schedule, chunk_cfg))
    pred = torch.cat(outs).permute(0, 2, 3, 1).numpy()
    continuous = stitch(list(pred), grid)[..., 0]
    binary = (continuous > config.threshold).astype(np.uint8)
    return Segmentation(binary, continuous.astype(np.float32), time.perf_counter() - start)
