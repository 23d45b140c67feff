"""Training loop, checkpointing and the ablation variants.

Variants:

* ``full`` - diffusion denoiser with feature mappers and attention
* ``A1``   - ``full`` without the feature pyramid and mappers
* ``A2``   - ``A1`` trained as a direct segmenter with pixelwise BCE
  (no noisy-mask input, no step embedding, single forward pass)
* ``A3``   - ``A2`` without attention layers
"""

from dataclasses import asdict, dataclass, field, fields
import logging
import math
from pathlib import Path
import time
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .data import DatasetManifest, PatchBank, assert_disjoint, load_dataset
from .diffusion import NoiseSchedule, denoising_loss, make_linear_schedule
from .features import FrozenBackbone, build_backbone, extract
from .metrics import ConfusionCounts, confusion, f1, iou
from .network import ConditionalUNet, DenoiserConfig
from .sampler import SamplerConfig, segment

log = logging.getLogger(__name__)

VARIANTS = ("full", "A1", "A2", "A3")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DiffusionConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.num_steps, self.beta_start, self.beta_end)


@dataclass
class TrainConfig:
    # AdamW settings
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    max_steps: int = 10000
    batch_size: int = 16
    checkpoint_every: int = 1000
    ablation: str = "full"
    seed: int = 0
    patch_size: int = 64
    lr_schedule: str = "constant"  # or "cosine"
    grad_clip: Optional[float] = None
    val_fraction: float = 0.1
    val_max_images: int = 16
    val_sampling_steps: int = 5
    log_every: int = 10
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    backbone: dict = field(default_factory=lambda: {"kind": "random", "channel_counts": [32, 64, 128], "seed": 0})

    def __post_init__(self):
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig.from_dict(self.denoiser)
        if isinstance(self.diffusion, dict):
            self.diffusion = DiffusionConfig(**self.diffusion)
        self.validate()

    def validate(self):
        errors = []
        for name in ("learning_rate", "weight_decay"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be nonnegative")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                errors.append(f"{name} must lie in (0, 1)")
        for name in ("batch_size", "checkpoint_every", "patch_size", "val_sampling_steps", "log_every"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be at least 1")
        if self.max_steps < 0:
            errors.append("max_steps must be nonnegative")
        if self.ablation not in VARIANTS:
            errors.append(f"ablation must be one of {VARIANTS}, got {self.ablation!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            errors.append("lr_schedule must be 'constant' or 'cosine'")
        if not 0.0 <= self.val_fraction < 1.0:
            errors.append("val_fraction must lie in [0, 1)")
        if errors:
            raise ValueError("invalid training config: " + "; ".join(errors))

    def variant_denoiser(self) -> DenoiserConfig:
        """Denoiser config with the ablation flags applied."""
        d = self.denoiser.to_dict()
        d["mapper_channels"] = list(self.backbone.get("channel_counts", d["mapper_channels"]))
        if self.ablation != "full":
            d["use_mappers"] = False
        if self.ablation in ("A2", "A3"):
            d["use_diffusion"] = False
        if self.ablation == "A3":
            d["use_attention"] = False
        return DenoiserConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"invalid training config: unknown fields {unknown}")
        return cls(**d)


@dataclass
class TrainState:
    model: ConditionalUNet
    optimizer: torch.optim.Optimizer
    backbone: Optional[FrozenBackbone]
    step: int = 0
    loss_history: List[float] = field(default_factory=list)


def _step_generator(seed: int, step: int) -> torch.Generator:
    s = int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(s)


def _lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "cosine" and config.max_steps > 0:
        return config.learning_rate * 0.5 * (1 + math.cos(math.pi * min(step, config.max_steps) / config.max_steps))
    return config.learning_rate


def init_state(config: TrainConfig) -> TrainState:
    """Fresh model, optimizer and (frozen) backbone, all seeded from ``config.seed``."""
    mconf = config.variant_denoiser()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ConditionalUNet(mconf)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)
    backbone = build_backbone(config.backbone) if mconf.use_mappers else None
    return TrainState(model, optimizer, backbone)


def compute_loss(state: TrainState, batch, schedule: NoiseSchedule, config: TrainConfig,
                 gen: torch.Generator) -> torch.Tensor:
    model = state.model
    pyramid = batch.pyramid
    if model.config.use_mappers and pyramid is None:
        pyramid = extract(batch.images, state.backbone)
    if not model.config.use_diffusion:
        logits = model(None, None, batch.images, pyramid)
        return F.binary_cross_entropy_with_logits(logits, (batch.masks > 0).to(logits.dtype))
    b = batch.masks.shape[0]
    t = torch.randint(1, schedule.num_steps + 1, (b,), generator=gen)
    noise = torch.randn(batch.masks.shape, generator=gen, dtype=batch.masks.dtype)
    return denoising_loss(model, batch.masks, batch.images, pyramid, t, noise, schedule)


def train_step(state: TrainState, batch, schedule: NoiseSchedule, config: TrainConfig):
    """One AdamW update; returns ``(state, loss)``.

    Step indices and noise come from a generator keyed on ``(seed, step)``, so
    the update is a deterministic function of state, batch and seed.
    """
    state.model.train()
    gen = _step_generator(config.seed, state.step)
    lr = _lr_at(config, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    loss = compute_loss(state, batch, schedule, config, gen)
    value = float(loss.detach())
    if not math.isfinite(value):
        tail = ", ".join(f"{v:.4g}" for v in state.loss_history[-10:])
        raise TrainingDiverged(f"non-finite loss {value} at step {state.step} (lr={lr}); recent losses: [{tail}]")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), config.grad_clip)
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(value)
    del state.loss_history[:-100]
    return state, value


def checkpoint_payload(state: TrainState, config: TrainConfig, schedule: NoiseSchedule) -> dict:
    backbone_state = None
    if state.backbone is not None and state.backbone.kind == "random":
        backbone_state = state.backbone.state_dict()
    return {
        "variant": config.ablation,
        "step": state.step,
        "denoiser_config": state.model.config.to_dict(),
        "schedule": schedule.metadata(),
        "backbone": dict(config.backbone),
        "backbone_state": backbone_state,
        "train_config": config.to_dict(),
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "loss_history": list(state.loss_history),
    }


def restore_state(ckpt: dict, config: TrainConfig) -> TrainState:
    state = init_state(config)
    state.model.load_state_dict(ckpt["model_state"])
    state.optimizer.load_state_dict(ckpt["optimizer_state"])
    if state.backbone is not None and ckpt.get("backbone_state") is not None:
        state.backbone.load_state_dict(ckpt["backbone_state"])
    state.step = int(ckpt["step"])
    state.loss_history = list(ckpt.get("loss_history", []))
    return state


def validate(state: TrainState, samples, schedule: NoiseSchedule, config: TrainConfig) -> dict:
    """Micro-averaged IoU/F1 of the current parameters on held-out images."""
    state.model.eval()
    sconf = SamplerConfig(num_steps=min(config.val_sampling_steps, schedule.num_steps), seed=config.seed)
    total = ConfusionCounts()
    for s in samples:
        seg = segment(state.model, s.image, state.backbone, schedule, sconf, config.patch_size)
        total = total + confusion(seg.binary, (s.mask[..., 0] > 0).astype(np.uint8))
    state.model.train()
    return {"val_iou": iou(total), "val_f1": f1(total)}


def _split_validation(samples, config: TrainConfig):
    n_val = int(round(config.val_fraction * len(samples)))
    if n_val == 0 or len(samples) < 2:
        return samples, []
    order = np.random.default_rng([config.seed, 7]).permutation(len(samples))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx][:config.val_max_images]
    return train, val


def _fmt_record(record: dict) -> str:
    parts = []
    for k, v in record.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def run_training(config: TrainConfig, dataset_manifest: DatasetManifest, output_dir,
                 test_manifest: Optional[DatasetManifest] = None, resume: bool = True,
                 stop_at: Optional[int] = None):
    """Train ``config.ablation`` on the manifest's samples; returns ``(checkpoint, log)`` paths.

    Picks up from the newest checkpoint in ``output_dir`` when ``resume`` is
    set. ``stop_at`` ends the run early (simulating an interruption) without
    changing the schedule implied by ``max_steps``.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if test_manifest is not None:
        assert_disjoint(dataset_manifest, test_manifest)
    schedule = config.diffusion.build()
    samples = list(load_dataset(dataset_manifest, patch_size=config.patch_size))
    train_samples, val_samples = _split_validation(samples, config)
    bank = PatchBank(train_samples, config.patch_size, config.batch_size, config.seed)

    latest = ckpt_io.latest_checkpoint(out) if resume else None
    if latest is not None:
        state = restore_state(ckpt_io.load_checkpoint(latest), config)
        log.info("resumed from %s at step %d", latest, state.step)
    else:
        state = init_state(config)
    backbone_hash = state.backbone.parameter_hash() if state.backbone is not None else None

    log_path = out / "train.log"
    mode = "a" if latest is not None else "w"
    end = config.max_steps if stop_at is None else min(stop_at, config.max_steps)
    last_ckpt = latest
    with open(log_path, mode) as logf:
        def emit(record):
            logf.write(_fmt_record(record) + "\n")
            logf.flush()

        if state.step == 0 and latest is None:
            last_ckpt = ckpt_io.save_checkpoint(out / ckpt_io.checkpoint_name(0),
                                                checkpoint_payload(state, config, schedule))
        t0 = time.perf_counter()
        while state.step < end:
            batch = bank.batch(state.step)
            state, loss = train_step(state, batch, schedule, config)
            if state.step % config.log_every == 0 or state.step == end:
                emit({"step": state.step, "loss": loss, "lr": _lr_at(config, state.step - 1),
                      "elapsed": round(time.perf_counter() - t0, 3)})
            if state.step % config.checkpoint_every == 0 or state.step == end:
                last_ckpt = ckpt_io.save_checkpoint(out / ckpt_io.checkpoint_name(state.step),
                                                    checkpoint_payload(state, config, schedule))
                if val_samples:
                    emit({"step": state.step, **validate(state, val_samples, schedule, config)})
    if backbone_hash is not None and state.backbone.parameter_hash() != backbone_hash:
        raise RuntimeError("frozen backbone parameters changed during training")
    return last_ckpt, log_path


def read_log(path) -> List[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for part in line.split():
            k, _, v = part.partition("=")
            try:
                rec[k] = int(v)
            except ValueError:
                try:
                    rec[k] = float(v)
                except ValueError:
                    rec[k] = v
        if rec:
            records.append(rec)
    return records
