"""Pixel-level confusion counts, IoU/F1 scoring and report emission."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

# Published scores (percent) kept as context for desk-scale results; they
# need the full greenhouse corpora and are not asserted anywhere.
REFERENCE_SCORES = {
    "LaboroTomato": {
        "full": {"iou": 84.04, "f1": 90.22},
        "A1": {"iou": 64.05, "f1": 55.63},
        "A2": {"iou": 70.72, "f1": 50.61},
        "A3": {"iou": 78.92, "f1": 40.53},
        "MaskRCNN": {"iou": 79.34, "f1": 84.14},
        "YOLACT": {"iou": 66.90, "f1": 78.73},
        "SOLOv2": {"iou": 74.63, "f1": 81.23},
        "UNet": {"iou": 78.92, "f1": 40.53},
        "FCN-ResNet": {"iou": 79.70, "f1": 87.69},
        "PSPNet": {"iou": 74.14, "f1": 83.87},
        "DeepLab v3+": {"iou": 64.68, "f1": 76.42},
        "PointRend": {"iou": 73.88, "f1": 83.58},
        "BiSeNet v2": {"iou": 72.15, "f1": 82.52},
        "SegFormer": {"iou": 82.02, "f1": 89.63},
    },
    "Tomatopia": {
        "full": {"iou": 81.25, "f1": 88.64},
        "A1": {"iou": 65.63, "f1": 74.92},
        "A2": {"iou": 72.66, "f1": 69.21},
        "A3": {"iou": 78.50, "f1": 75.86},
        "UNet": {"iou": 78.50, "f1": 75.86},
        "FCN-ResNet": {"iou": 75.04, "f1": 85.30},
        "PSPNet": {"iou": 74.44, "f1": 84.93},
        "DeepLab v3+": {"iou": 69.44, "f1": 81.33},
        "PointRend": {"iou": 76.82, "f1": 86.56},
        "BiSeNet v2": {"iou": 78.82, "f1": 86.88},
        "SegFormer": {"iou": 72.00, "f1": 83.13},
    },
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def iou(counts: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); 1.0 when both masks are empty."""
    denom = counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def f1(counts: ConfusionCounts) -> float:
    """2tp / (2tp + fp + fn); 1.0 when both masks are empty."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else 2 * counts.tp / denom


def precision(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fp
    if denom == 0:
        return 1.0 if counts.fn == 0 else 0.0
    return counts.tp / denom


def recall(counts: ConfusionCounts) -> float:
    denom = counts.tp + counts.fn
    if denom == 0:
        return 1.0 if counts.fp == 0 else 0.0
    return counts.tp / denom


@dataclass
class MetricsReport:
    iou: float
    f1: float
    precision: float
    recall: float
    counts: ConfusionCounts
    per_image: Optional[List["MetricsReport"]] = None
    image_id: Optional[str] = None

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, image_id=None, per_image=None):
        return cls(iou(counts), f1(counts), precision(counts), recall(counts),
                   counts, per_image=per_image, image_id=image_id)

    def as_dict(self) -> dict:
        return {
            "iou": self.iou, "f1": self.f1, "precision": self.precision, "recall": self.recall,
            "tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "tn": self.counts.tn,
        }

    def to_keyvalue(self) -> str:
        """Line-oriented ``key=value`` rendering; per-image rows use ``image.<id>.<key>``."""
        lines = [f"{k}={_fmt(v)}" for k, v in self.as_dict().items()]
        lines.append(f"num_images={len(self.per_image or [])}")
        for rep in self.per_image or []:
            for k, v in rep.as_dict().items():
                lines.append(f"image.{rep.image_id}.{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'image':<24}{'IoU':>9}{'F1':>9}{'prec':>9}{'recall':>9}"
        rows = [header, "-" * len(header)]
        for rep in self.per_image or []:
            rows.append(f"{str(rep.image_id):<24}{rep.iou:>9.4f}{rep.f1:>9.4f}"
                        f"{rep.precision:>9.4f}{rep.recall:>9.4f}")
        rows.append("-" * len(header))
        rows.append(f"{'ALL (micro)':<24}{self.iou:>9.4f}{self.f1:>9.4f}"
                    f"{self.precision:>9.4f}{self.recall:>9.4f}")
        return "\n".join(rows) + "\n"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def read_keyvalue(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def merge_instances(instance_masks: Sequence, shape=None) -> np.ndarray:
    """Pixel-wise union of instance masks into one semantic prediction map."""
    if len(instance_masks) == 0:
        if shape is None:
            raise ValueError("an empty instance list needs an explicit output shape")
        return np.zeros(shape, dtype=np.uint8)
    masks = [_as_binary(m, f"instance {i}") for i, m in enumerate(instance_masks)]
    ref = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != ref:
            raise ValueError(f"instance {i} has shape {m.shape}, expected {ref}")
    return np.logical_or.reduce(np.stack(masks), axis=0).astype(np.uint8)


def evaluate_dataset(model: Callable, dataset: Iterable, config=None) -> MetricsReport:
    """Micro-averaged scores of ``model`` over ``dataset``.

    ``model`` maps an RGB image to a binary H x W mask. ``dataset`` yields
    either ``SegmentationSample`` objects or ``(image, gt)`` pairs; ground
    truth may be in {-1, +1} or {0, 1}.
    """
    total = ConfusionCounts()
    per_image = []
    for i, item in enumerate(dataset):
        if hasattr(item, "image"):
            image, gt, image_id = item.image, item.mask, item.id
        else:
            image, gt = item
            image_id = str(i)
        gt = np.asarray(gt)
        if gt.ndim == 3:
            gt = gt[..., 0]
        gt_bin = (gt > 0).astype(np.uint8)
        pred = np.asarray(model(image))
        if pred.ndim == 3:
            pred = pred[..., 0]
        counts = confusion(pred.astype(np.uint8), gt_bin)
        total = total + counts
        per_image.append(MetricsReport.from_counts(counts, image_id=image_id))
    if not per_image:
        raise ValueError("cannot evaluate an empty dataset")
    return MetricsReport.from_counts(total, per_image=per_image)


def write_report(report: MetricsReport, out_dir, stem: str = "metrics"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kv = out_dir / f"{stem}.txt"
    table = out_dir / f"{stem}_table.txt"
    kv.write_text(report.to_keyvalue())
    table.write_text(report.to_table())
    return kv, table
