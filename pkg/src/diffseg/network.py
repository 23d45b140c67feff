"""Conditional attention UNet that predicts the clean mask.

Inputs are the noisy mask, the diffusion step, the RGB condition and an
optional frozen feature pyramid. Pyramid level k is adapted by mapper
``M_k`` and added to the output of encoder level k (k = 1, 2, 3), resized to
that level's resolution.
"""

from dataclasses import asdict, dataclass, field
import math
from typing import Optional, Sequence, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .features import FeaturePyramid


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    channel_multipliers: Tuple[int, ...] = (1, 2, 4)
    attention_levels: Tuple[int, ...] = (2,)
    time_embed_dim: Optional[int] = None  # defaults to 4 * base_channels
    mapper_channels: Tuple[int, int, int] = (32, 64, 128)
    use_mappers: bool = True
    use_attention: bool = True
    # False: predict the mask from the image alone (no noisy mask, no step input)
    use_diffusion: bool = True
    num_res_blocks: int = 1
    attention_heads: int = 4
    mapper_identity_init: bool = False
    image_channels: int = 3

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        self.mapper_channels = tuple(int(c) for c in self.mapper_channels)
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if len(self.channel_multipliers) < 3:
            raise ValueError("the UNet needs at least 3 resolution levels (one per mapper)")
        if len(self.mapper_channels) != 3 or min(self.mapper_channels) < 1:
            raise ValueError("mapper_channels must be three positive integers")
        if self.time_embed_dim is None:
            self.time_embed_dim = 4 * self.base_channels

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def level_channels(self):
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of (possibly fractional) step values, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, embed_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.mlp = nn.Sequential(nn.Linear(base_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.base_dim))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: Optional[int]):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout) if time_dim else None
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None:
            h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        while ch % heads:
            heads -= 1
        self.heads = heads
        self.norm = _norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bhci,bhcj->bhij", q, k) / math.sqrt(c // self.heads), dim=-1)
        out = torch.einsum("bhij,bhcj->bhci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Mapper(nn.Module):
    """Trainable conv adapter from a pyramid level to an encoder level width.

    ``out = proj(x) + refine(proj(x))``; spatial size is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int, identity_init: bool = False):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.refine = nn.Sequential(_norm(out_channels), nn.SiLU(),
                                    nn.Conv2d(out_channels, out_channels, 3, padding=1))
        if identity_init:
            if in_channels != out_channels:
                raise ValueError("identity init needs in_channels == out_channels")
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(in_channels).view(in_channels, in_channels, 1, 1))
                self.proj.bias.zero_()
                self.refine[-1].weight.zero_()
                self.refine[-1].bias.zero_()

    def forward(self, x):
        h = self.proj(x)
        return h + self.refine(h)


def build_mapper(level_index: int, in_channels: int, out_channels: int,
                 identity_init: bool = False) -> Mapper:
    if level_index not in (1, 2, 3):
        raise ValueError(f"level_index must be 1, 2 or 3, got {level_index}")
    if in_channels < 1 or out_channels < 1:
        raise ValueError("channel counts must be positive")
    return Mapper(in_channels, out_channels, identity_init=identity_init)


def input_fusion(xt: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Concatenate the condition image and noisy mask as channels [R, G, B, x_t]."""
    if xt.shape[0] != y.shape[0] or xt.shape[-2:] != y.shape[-2:]:
        raise ValueError(f"noisy mask {tuple(xt.shape)} and image {tuple(y.shape)} are not aligned")
    return torch.cat([y, xt], dim=1)


class ConditionalUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = cfg = config
        chans = cfg.level_channels
        tdim = cfg.time_embed_dim if cfg.use_diffusion else None

        self.time_embed = TimeEmbedding(cfg.base_channels, tdim) if cfg.use_diffusion else None
        in_ch = cfg.image_channels + (1 if cfg.use_diffusion else 0)
        self.conv_in = nn.Conv2d(in_ch, chans[0], 3, padding=1)

        def attn(level, ch):
            if cfg.use_attention and level in cfg.attention_levels:
                return SelfAttention(ch, cfg.attention_heads)
            return nn.Identity()

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = chans[0]
        for level, cout in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, cout, tdim))
                ch = cout
            self.down_blocks.append(blocks)
            self.down_attn.append(attn(level, ch))
            last = level == cfg.num_levels - 1
            self.downsamples.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mappers = None
        if cfg.use_mappers:
            self.mappers = nn.ModuleList(
                build_mapper(k + 1, cfg.mapper_channels[k], chans[k], cfg.mapper_identity_init)
                for k in range(3)
            )

        self.mid_block1 = ResBlock(ch, ch, tdim)
        self.mid_attn = SelfAttention(ch, cfg.attention_heads) if cfg.use_attention else nn.Identity()
        self.mid_block2 = ResBlock(ch, ch, tdim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(cfg.num_levels)):
            cout = chans[level]
            self.up_blocks.append(ResBlock(ch + cout, cout, tdim))
            ch = cout
            self.up_attn.append(attn(level, ch))
            if level > 0:
                self.upsamples.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                                    nn.Conv2d(ch, chans[level - 1], 3, padding=1)))
                ch = chans[level - 1]
            else:
                self.upsamples.append(nn.Identity())

        self.out = nn.Sequential(_norm(ch), nn.SiLU(), nn.Conv2d(ch, 1, 3, padding=1))

    def _check_inputs(self, xt, y, pyramid):
        cfg = self.config
        if y.ndim != 4 or y.shape[1] != cfg.image_channels:
            raise ValueError(f"expected image of shape (B, {cfg.image_channels}, H, W), got {tuple(y.shape)}")
        mult = 2 ** (cfg.num_levels - 1)
        if y.shape[-2] % mult or y.shape[-1] % mult:
            raise ValueError(f"spatial size {tuple(y.shape[-2:])} must be a multiple of {mult}")
        if cfg.use_diffusion and (xt is None or xt.ndim != 4 or xt.shape[1] != 1):
            raise ValueError("a noisy mask of shape (B, 1, H, W) is required")
        if (pyramid is not None) != cfg.use_mappers:
            raise ValueError("a feature pyramid must be given exactly when use_mappers is enabled")

    def forward(self, xt: Optional[torch.Tensor], t, y: torch.Tensor,
                pyramid: Optional[FeaturePyramid] = None) -> torch.Tensor:
        self._check_inputs(xt, y, pyramid)
        cfg = self.config
        temb = None
        if cfg.use_diffusion:
            if not isinstance(t, torch.Tensor):
                t = torch.tensor(float(t))
            t = t.to(dtype=y.dtype, device=y.device).reshape(-1).expand(y.shape[0])
            temb = self.time_embed(t)
            h = self.conv_in(input_fusion(xt, y))
        else:
            h = self.conv_in(y)

        skips = []
        for level in range(cfg.num_levels):
            for block in self.down_blocks[level]:
                h = block(h, temb)
            h = self.down_attn[level](h)
            if self.mappers is not None and level < 3:
                feat = self.mappers[level](pyramid.levels[level].to(h.dtype))
                if feat.shape[-2:] != h.shape[-2:]:
                    feat = F.interpolate(feat, size=h.shape[-2:], mode="bilinear", align_corners=False)
                h = h + feat
            skips.append(h)
            h = self.downsamples[level](h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb)), temb)

        for i, level in enumerate(reversed(range(cfg.num_levels))):
            h = self.up_blocks[i](torch.cat([h, skips[level]], dim=1), temb)
            h = self.up_attn[i](h)
            h = self.upsamples[i](h)
        return self.out(h)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_groups(model: ConditionalUNet) -> dict:
    """Named trainable parameter groups (used for gradient-flow checks)."""
    groups = {"encoder": [], "decoder": [], "mappers": [], "attention": [], "time_embedding": []}
    for name, p in model.named_parameters():
        if "attn" in name:
            groups["attention"].append(p)
        elif name.startswith("mappers"):
            groups["mappers"].append(p)
        elif name.startswith("time_embed"):
            groups["time_embedding"].append(p)
        elif name.startswith(("up_", "upsamples", "out")):
            groups["decoder"].append(p)
        else:
            groups["encoder"].append(p)
    return {k: v for k, v in groups.items() if v}
