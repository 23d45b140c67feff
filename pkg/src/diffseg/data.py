"""Image/mask corpora on disk, the synthetic fruit generator, and patch batching.

On-disk layout::

    <root>/images/<id>.<ext>      RGB (extra channels such as depth are dropped)
    <root>/masks/<id>.png         single channel, 0/255 or 0/1
    <root>/<split>.manifest       optional key = value split file

A corpus may instead keep its predetermined split as ``<root>/<split>/images``
and ``<root>/<split>/masks``.
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
import torch

from .patcher import split as split_patches

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# target sizes (H, W) used for the two greenhouse corpora
LABOROTOMATO_SIZE = (512, 768)
TOMATOPIA_SIZE = (768, 512)


class DataError(Exception):
    """Missing, unreadable or inconsistent dataset files."""


@dataclass
class SegmentationSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W x 1 float32 in {-1, +1}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")


@dataclass
class DatasetManifest:
    root: Path
    split: str = "train"
    target_size: Tuple[int, int] = (64, 64)
    files: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.target_size = tuple(int(v) for v in self.target_size)

    @property
    def image_dir(self) -> Path:
        nested = self.root / self.split / "images"
        return nested if nested.is_dir() else self.root / "images"

    @property
    def mask_dir(self) -> Path:
        return self.image_dir.parent / "masks"

    def write(self, path) -> Path:
        path = Path(path)
        try:
            root = self.root.resolve().relative_to(path.parent.resolve())
        except ValueError:
            root = self.root.resolve()
        lines = [
            f"root = {root.as_posix() or '.'}",
            f"split = {self.split}",
            f"target_size = {self.target_size[0]}x{self.target_size[1]}",
        ]
        lines += [f"file = {f}" for f in self.files]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        values, files = {}, []
        for line in path.read_text().splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "file":
                files.append(value)
            else:
                values[key] = value
        root = Path(values.get("root", "."))
        if not root.is_absolute():
            root = path.parent / root
        h, w = values.get("target_size", "64x64").lower().split("x")
        return cls(root, values.get("split", "train"), (int(h), int(w)), files)

    @classmethod
    def from_directory(cls, root, split: str = "train", target_size=(64, 64)) -> "DatasetManifest":
        """Manifest of every image under ``root`` (or ``root/<split>``), sorted by id."""
        m = cls(root, split, target_size)
        manifest_file = m.root / f"{split}.manifest"
        if not (m.root / split / "images").is_dir() and manifest_file.is_file():
            found = cls.read(manifest_file)
            found.target_size = m.target_size
            return found
        if not m.image_dir.is_dir():
            raise DataError(f"no image directory under {m.root}")
        m.files = sorted(p.stem for p in m.image_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        return m


def assert_disjoint(a: DatasetManifest, b: DatasetManifest):
    overlap = set(a.files) & set(b.files)
    if overlap and a.image_dir.resolve() == b.image_dir.resolve():
        raise DataError(f"{len(overlap)} ids appear in both {a.split} and {b.split}: {sorted(overlap)[:5]}")


def _find_image(manifest: DatasetManifest, image_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        for cand in (ext, ext.upper()):
            p = manifest.image_dir / f"{image_id}{cand}"
            if p.is_file():
                return p
    raise DataError(f"no image file for id {image_id!r} in {manifest.image_dir}")


def _read_image(path: Path, size_hw) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size_hw[1], size_hw[0]):
                im = im.resize((size_hw[1], size_hw[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: Path, size_hw) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
            if arr.ndim == 3:
                arr = arr[..., 0]
            scale = 255.0 if arr.max(initial=0) > 1 else 1.0
            im = Image.fromarray((arr.astype(np.float32) / scale * 255).astype(np.uint8), mode="L")
            if im.size != (size_hw[1], size_hw[0]):
                im = im.resize((size_hw[1], size_hw[0]), Image.NEAREST)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return np.where(arr > 0.5, 1.0, -1.0).astype(np.float32)[..., None]


def load_dataset(manifest: DatasetManifest, patch_size: Optional[int] = None) -> Iterator[SegmentationSample]:
    """Yield resized, range-normalised samples in id order.

    Images are resized bilinearly, masks with nearest neighbour and then
    binarised to {-1, +1}. Every image must have ``masks/<id>.png``.
    """
    h, w = manifest.target_size
    if patch_size and (h % patch_size or w % patch_size):
        raise DataError(f"target size {h}x{w} is not a multiple of patch size {patch_size}")
    ids = sorted(manifest.files)
    missing = [i for i in ids if not (manifest.mask_dir / f"{i}.png").is_file()]
    if missing:
        raise DataError(f"missing mask files for ids: {', '.join(missing)}")
    for image_id in ids:
        image = _read_image(_find_image(manifest, image_id), (h, w))
        mask = _read_mask(manifest.mask_dir / f"{image_id}.png", (h, w))
        yield SegmentationSample(image, mask, image_id)


def make_split(root, seed: int = 0, train_fraction: float = 0.8, target_size=(64, 64)):
    """Seeded random train/test split of a flat corpus, persisted as manifests."""
    everything = DatasetManifest(root, "all", target_size)
    everything.files = sorted(p.stem for p in everything.image_dir.iterdir()
                              if p.suffix.lower() in IMAGE_EXTENSIONS)
    order = np.random.default_rng(seed).permutation(len(everything.files))
    n_train = int(round(train_fraction * len(order)))
    train_ids = sorted(everything.files[i] for i in order[:n_train])
    test_ids = sorted(everything.files[i] for i in order[n_train:])
    train = DatasetManifest(root, "train", target_size, train_ids)
    test = DatasetManifest(root, "test", target_size, test_ids)
    assert_disjoint(train, test)
    train.write(Path(root) / "train.manifest")
    test.write(Path(root) / "test.manifest")
    return train, test


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float

    def contains(self, rows, cols):
        """Analytic membership of pixel coordinates (row, col)."""
        dy, dx = rows - self.cy, cols - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


def _smooth_field(rng, h, w, cells):
    coarse = rng.random((cells, cells)).astype(np.float32)
    im = Image.fromarray((coarse * 255).astype(np.uint8), mode="L").resize((w, h), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def _sample_ellipses(rng, h, w):
    short = min(h, w)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        shapes = []
        for _ in range(n):
            rx = rng.uniform(0.08, 0.2) * short
            ry = rx * rng.uniform(0.75, 1.25)
            shapes.append(Ellipse(rng.uniform(0, h), rng.uniform(0, w), ry, rx, rng.uniform(0, math.pi)))
        rows, cols = np.mgrid[0:h, 0:w]
        mask = np.zeros((h, w), dtype=bool)
        for e in shapes:
            mask |= e.contains(rows, cols)
        if 0.05 <= mask.mean() <= 0.45:
            return shapes, mask
    raise RuntimeError("could not place ellipses with a positive fraction in [0.05, 0.45]")


def render_synthetic(rng: np.random.Generator, size=(64, 64)):
    """One synthetic scene: (uint8 RGB image, bool mask, ellipse list)."""
    h, w = size
    shapes, mask = _sample_ellipses(rng, h, w)
    rows, cols = np.mgrid[0:h, 0:w]

    # foliage: green hues modulated by two octaves of smooth noise
    tex = 0.6 * _smooth_field(rng, h, w, 6) + 0.4 * _smooth_field(rng, h, w, 14)
    img = np.empty((h, w, 3), dtype=np.float32)
    img[..., 0] = 0.10 + 0.25 * tex
    img[..., 1] = 0.25 + 0.45 * tex
    img[..., 2] = 0.05 + 0.20 * tex

    for e in shapes:
        inside = e.contains(rows, cols)
        r = np.sqrt(((rows - e.cy) / e.ry) ** 2 + ((cols - e.cx) / e.rx) ** 2)
        shade = 1.0 - 0.35 * np.clip(r, 0, 1) ** 2
        red = rng.uniform(0.65, 0.95)
        green = rng.uniform(0.05, 0.35)
        blue = rng.uniform(0.03, 0.15)
        for ch, val in enumerate((red, green, blue)):
            img[..., ch] = np.where(inside, val * shade, img[..., ch])

    # occluding stems: thin foliage-coloured bars drawn over everything
    for _ in range(int(rng.integers(0, 4))):
        angle = rng.uniform(0, math.pi)
        offset = rng.uniform(-0.3, 0.3) * min(h, w)
        width = rng.uniform(1.0, 2.5)
        dist = np.abs((cols - w / 2) * math.sin(angle) - (rows - h / 2) * math.cos(angle) - offset)
        bar = dist <= width / 2
        img[bar] = np.array([0.15, 0.45, 0.10]) * rng.uniform(0.8, 1.2)

    img += rng.normal(0, 0.03, img.shape).astype(np.float32)
    img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    return img, mask, shapes


def generate_synthetic(out_dir, count: int, size=(64, 64), seed: int = 0,
                       test_fraction: float = 0.2) -> Tuple[DatasetManifest, DatasetManifest]:
    """Write ``count`` synthetic scenes plus train/test manifests under ``out_dir``.

    Fruits are 1-6 red-hued ellipses over green textured noise, partly
    covered by thin stems; masks are the exact ellipse unions (stems do not
    cut them). Output is byte-identical for a fixed seed.
    """
    h, w = (int(v) for v in size)
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise ValueError(f"synthetic size must be a positive multiple of 16, got {h}x{w}")
    if count < 1:
        raise ValueError("count must be positive")
    out = Path(out_dir)
    for sub in ("images", "masks", "shapes"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        image_id = f"syn_{i:05d}"
        rng = np.random.default_rng([seed, i])
        img, mask, shapes = render_synthetic(rng, (h, w))
        Image.fromarray(img, mode="RGB").save(out / "images" / f"{image_id}.png")
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / "masks" / f"{image_id}.png")
        (out / "shapes" / f"{image_id}.json").write_text(
            json.dumps([e.__dict__ for e in shapes], indent=1) + "\n")
        ids.append(image_id)
    n_test = int(round(test_fraction * count))
    order = np.random.default_rng([seed, count]).permutation(count)
    test_ids = sorted(ids[j] for j in order[:n_test])
    train_ids = sorted(ids[j] for j in order[n_test:])
    train = DatasetManifest(out, "train", (h, w), train_ids)
    test = DatasetManifest(out, "test", (h, w), test_ids)
    assert_disjoint(train, test)
    train.write(out / "train.manifest")
    test.write(out / "test.manifest")
    return train, test


def load_shapes(path) -> List[Ellipse]:
    return [Ellipse(**d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x p x p in [0, 1]
    masks: torch.Tensor  # B x 1 x p x p in {-1, +1}
    keys: List[Tuple[str, int]]  # (sample id, patch index)
    pyramid: object = None  # filled by the trainer from the frozen backbone


class PatchBank:
    """All training patches held as tensors; batch ``k`` is a pure function of ``k``.

    Epoch ``e`` visits every patch once in the order
    ``default_rng([seed, e]).permutation``; the last batch of an epoch may be short.
    """

    def __init__(self, samples: Sequence[SegmentationSample], patch_size: int = 64,
                 batch_size: int = 16, shuffle_seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        images, masks, keys = [], [], []
        for s in samples:
            img_p, _ = split_patches(s.image, patch_size)
            mask_p, _ = split_patches(s.mask, patch_size)
            images += img_p
            masks += mask_p
            keys += [(s.id, j) for j in range(len(img_p))]
        if not keys:
            raise ValueError("no samples to batch")
        self.images = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
        self.masks = torch.from_numpy(np.stack(masks)).permute(0, 3, 1, 2).contiguous()
        self.keys = keys
        self.batch_size = int(batch_size)
        self.shuffle_seed = int(shuffle_seed)

    def __len__(self):
        return len(self.keys)

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.keys) / self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.shuffle_seed, int(epoch)]).permutation(len(self.keys))

    def batch(self, step: int) -> Batch:
        epoch, j = divmod(int(step), self.batches_per_epoch)
        idx = self.order(epoch)[j * self.batch_size:(j + 1) * self.batch_size]
        t_idx = torch.from_numpy(idx)
        return Batch(self.images[t_idx], self.masks[t_idx], [self.keys[i] for i in idx])

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        start = epoch * self.batches_per_epoch
        for k in range(self.batches_per_epoch):
            yield self.batch(start + k)


def batcher(dataset: Sequence[SegmentationSample], batch_size: int, patch_size: int = 64,
            shuffle_seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    """One epoch of shuffled patch batches; same seed and epoch give the same order."""
    return PatchBank(list(dataset), patch_size, batch_size, shuffle_seed).epoch(epoch)
