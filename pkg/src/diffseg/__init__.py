"""Conditional denoising-diffusion binary segmentation.

A mask x0 in {-1, +1} is corrupted by a fixed Gaussian chain; a UNet
conditioned on the RGB image and a frozen backbone's feature pyramid learns
to recover it, and a few-step ODE solver turns noise into a mask at test time.
"""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, make_linear_schedule, posterior_params, q_sample
from .metrics import MetricsReport, confusion, f1, iou
from .network import ConditionalUNet, DenoiserConfig
from .sampler import SamplerConfig, segment
from .trainer import TrainConfig, run_training

__all__ = [
    "ConditionalUNet",
    "DenoiserConfig",
    "MetricsReport",
    "NoiseSchedule",
    "SamplerConfig",
    "TrainConfig",
    "confusion",
    "f1",
    "iou",
    "make_linear_schedule",
    "posterior_params",
    "q_sample",
    "run_training",
    "segment",
]
