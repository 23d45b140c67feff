"""Figures for evaluation, training and ablation reports.

Everything renders off-screen to files. Overlays are built directly in pixel
space (no resampling), so flagged pixels map one-to-one onto the mask.
"""

from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

OVERLAY_COLOR = (255, 0, 255)
OVERLAY_ALPHA = 0.5


def to_uint8(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)


def overlay_mask(image, binary, color=OVERLAY_COLOR, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend ``color`` into the positive pixels of ``binary``; others are untouched."""
    img = to_uint8(image)
    binary = np.asarray(binary).astype(bool)
    if binary.shape != img.shape[:2]:
        raise ValueError(f"mask shape {binary.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    tint = (1 - alpha) * img[binary].astype(np.float64) + alpha * np.asarray(color, dtype=np.float64)
    out[binary] = tint.round().astype(np.uint8)
    return out


def continuous_to_uint8(continuous) -> np.ndarray:
    """Map a [-1, 1] mask estimate to 0..255 grey levels."""
    return ((np.clip(continuous, -1, 1) + 1) * 127.5).round().astype(np.uint8)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def score_histograms(report, path) -> Path:
    """Per-image IoU and F1 distributions, with the micro-averaged score marked."""
    per = report.per_image or []
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, key, overall in ((axes[0], "iou", report.iou), (axes[1], "f1", report.f1)):
        vals = [getattr(r, key) for r in per]
        ax.hist(vals, bins=np.linspace(0, 1, 21), color="0.6", edgecolor="0.2")
        ax.axvline(overall, color="C3", lw=1.5, label=f"micro {overall:.3f}")
        ax.set_xlabel({"iou": "IoU", "f1": "F1"}[key])
        ax.set_xlim(0, 1)
        ax.legend(loc="upper left", frameon=False)
    axes[0].set_ylabel("images")
    fig.tight_layout()
    return _save(fig, path)


def example_grid(images: List[np.ndarray], gts: List[np.ndarray], preds: List[np.ndarray],
                 ids: List[str], path, max_rows: int = 6) -> Path:
    """Rows of image / ground truth overlay / prediction overlay."""
    n = min(len(images), max_rows)
    if n == 0:
        raise ValueError("no examples to draw")
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for r in range(n):
        panels = (to_uint8(images[r]), overlay_mask(images[r], gts[r]), overlay_mask(images[r], preds[r]))
        for c, (panel, title) in enumerate(zip(panels, ("image", "ground truth", "prediction"))):
            ax = axes[r, c]
            ax.imshow(panel, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=9)
        axes[r, 0].set_ylabel(ids[r], fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(records: List[dict], path) -> Path:
    """Loss per logged step, plus validation IoU/F1 when present."""
    loss = [(r["step"], r["loss"]) for r in records if "loss" in r]
    val = [(r["step"], r["val_iou"], r["val_f1"]) for r in records if "val_iou" in r]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    if loss:
        s, v = zip(*loss)
        ax.plot(s, v, color="0.3", lw=1)
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    if val:
        ax2 = ax.twinx()
        s, vi, vf = zip(*val)
        ax2.plot(s, vi, "o-", color="C0", ms=3, label="val IoU")
        ax2.plot(s, vf, "s-", color="C1", ms=3, label="val F1")
        ax2.set_ylim(0, 1)
        ax2.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def ablation_chart(scores: Dict[str, Dict[str, float]], path,
                   reference: Optional[Dict[str, Dict[str, float]]] = None) -> Path:
    """Grouped IoU/F1 bars per variant; optional published scores as hollow markers."""
    names = list(scores)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(x - 0.2, [scores[n]["iou"] for n in names], 0.4, label="IoU", color="C0")
    ax.bar(x + 0.2, [scores[n]["f1"] for n in names], 0.4, label="F1", color="C1")
    if reference:
        ref = [n for n in names if n in reference]
        idx = [names.index(n) for n in ref]
        ax.plot(np.array(idx) - 0.2, [reference[n]["iou"] / 100 for n in ref], "o", mfc="none", mec="k",
                label="published")
        ax.plot(np.array(idx) + 0.2, [reference[n]["f1"] / 100 for n in ref], "o", mfc="none", mec="k")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, ncol=3, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)
