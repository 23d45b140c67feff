"""Frozen backbones producing a three-level feature pyramid of the RGB condition."""

from dataclasses import dataclass
from pathlib import Path
import hashlib
import logging

import torch
from torch import nn

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
PYRAMID_STRIDES = (4, 8, 16)

WIDE_RESNET50_URL = "https://download.pytorch.org/models/wide_resnet50_2-95faca4d.pth"


@dataclass
class FeaturePyramid:
    level1: torch.Tensor  # stride 4
    level2: torch.Tensor  # stride 8
    level3: torch.Tensor  # stride 16

    @property
    def levels(self):
        return (self.level1, self.level2, self.level3)

    @property
    def channel_counts(self):
        return tuple(int(x.shape[1]) for x in self.levels)

    def map(self, fn) -> "FeaturePyramid":
        return FeaturePyramid(*(fn(x) for x in self.levels))

    def __getitem__(self, index) -> "FeaturePyramid":
        return self.map(lambda x: x[index])


class FrozenBackbone(nn.Module):
    """Read-only feature extractor. Subclasses implement ``features``.

    Parameters never require grad and the module stays in eval mode even if
    a parent calls ``.train()``.
    """

    kind = "abstract"
    strides = PYRAMID_STRIDES

    def __init__(self, channel_counts, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        self.channel_counts = tuple(int(c) for c in channel_counts)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def features(self, x: torch.Tensor):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind, "channel_counts": list(self.channel_counts)}

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _conv_bn_relu(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class RandomConvBackbone(FrozenBackbone):
    """Small randomly initialised conv encoder with the stride-4/8/16 contract.

    Needs no download; the weights are a pure function of ``seed``.
    """

    kind = "random"

    def __init__(self, channel_counts=(32, 64, 128), seed: int = 0):
        super().__init__(channel_counts)
        self.seed = int(seed)
        c1, c2, c3 = self.channel_counts
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.stage1 = nn.Sequential(_conv_bn_relu(3, c1 // 2, 2), _conv_bn_relu(c1 // 2, c1, 2))
            self.stage2 = _conv_bn_relu(c1, c2, 2)
            self.stage3 = _conv_bn_relu(c2, c3, 2)
        self.freeze()

    def features(self, x):
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        return f1, f2, f3

    def spec(self) -> dict:
        return {**super().spec(), "seed": self.seed}


class WideResNetBackbone(FrozenBackbone):
    """ImageNet wide-residual network; taps the outputs of its first three residual stages."""

    kind = "wide_resnet50_2"

    def __init__(self, weights_path):
        super().__init__((256, 512, 1024))
        from torchvision.models import wide_resnet50_2

        self.weights_path = str(weights_path)
        net = wide_resnet50_2(weights=None)
        path = Path(weights_path)
        if not path.is_file():
            raise FileNotFoundError(
                f"backbone weights not found at {path}; fetch them with `diffseg download-weights`"
            )
        net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3
        self.freeze()

    def features(self, x):
        f1 = self.layer1(self.stem(x))
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return f1, f2, f3

    def spec(self) -> dict:
        return {**super().spec(), "weights_path": self.weights_path}


def build_backbone(spec: dict) -> FrozenBackbone:
    kind = spec.get("kind", "random")
    if kind == "random":
        return RandomConvBackbone(tuple(spec.get("channel_counts", (32, 64, 128))), seed=spec.get("seed", 0))
    if kind == WideResNetBackbone.kind:
        return WideResNetBackbone(spec["weights_path"])
    raise ValueError(f"unknown backbone kind {kind!r}")


def download_weights(dest) -> Path:
    """Fetch the ImageNet wide-resnet weights to ``dest`` (the only network access)."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    torch.hub.download_url_to_file(WIDE_RESNET50_URL, str(dest), progress=True)
    return dest


@torch.no_grad()
def extract(y: torch.Tensor, backbone: FrozenBackbone) -> FeaturePyramid:
    """Feature pyramid of raw [0, 1] RGB ``y`` (N x 3 x H x W, or 3 x H x W).

    H and W must be multiples of 16.
    """
    squeeze = y.ndim == 3
    if squeeze:
        y = y.unsqueeze(0)
    if y.ndim != 4 or y.shape[1] != 3:
        raise ValueError(f"expected RGB input with 3 channels, got shape {tuple(y.shape)}")
    h, w = y.shape[-2:]
    if h % 16 or w % 16:
        raise ValueError(f"input size {h}x{w} must be a multiple of 16")
    x = (y - backbone.mean.to(y.dtype)) / backbone.std.to(y.dtype)
    levels = backbone.features(x)
    for lvl, stride in zip(levels, backbone.strides):
        assert lvl.shape[-2:] == (h // stride, w // stride), (tuple(lvl.shape), stride)
    pyramid = FeaturePyramid(*(lvl.detach() for lvl in levels))
    return pyramid[0] if squeeze else pyramid
