"""Command line: prepare data, train, segment, evaluate and run the ablation matrix.

Every subcommand writes ``run_manifest.json`` into its output directory with
the resolved configuration, a content hash of code plus config, timestamps
and the files it produced.

Exit codes: 0 success, 2 usage/config error, 3 data or checkpoint error,
4 runtime failure (e.g. diverged training).
"""

import argparse
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
import hashlib
import json
import logging
import os
from pathlib import Path
import platform
import sys
from typing import List, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError
import torch

from . import __version__, plots
from .checkpoint import CheckpointError, load_checkpoint, restore_model
from .data import (
    IMAGE_EXTENSIONS,
    DataError,
    DatasetManifest,
    generate_synthetic,
    load_dataset,
    make_split,
)
from .features import download_weights
from .metrics import REFERENCE_SCORES, evaluate_dataset, write_report
from .sampler import ANCESTRAL, ODE_SOLVER, SamplerConfig, segment
from .trainer import VARIANTS, TrainConfig, TrainingDiverged, read_log, run_training

log = logging.getLogger("diffseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

OUTPUT_ROOT_ENV = "DIFFSEG_OUTPUT_ROOT"

# Reduced widths that train in minutes on a CPU; the library defaults are
# the full-size model.
PRESETS = {
    "default": {},
    "desk": {
        "batch_size": 16,
        "denoiser": {"base_channels": 16, "channel_multipliers": [1, 2, 4], "attention_heads": 4},
        "backbone": {"kind": "random", "channel_counts": [16, 32, 64], "seed": 0},
    },
}


class UsageError(Exception):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(config: dict) -> str:
    """Hash over the package sources and the resolved config, git-blob style."""
    lines = []
    for path in sorted(Path(__file__).parent.glob("*.py")):
        lines.append(f"{_git_blob_hash(path.read_bytes())} {path.name}")
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    lines.append(f"{_git_blob_hash(cfg)} config")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    argv: List[str]
    config: dict
    content_hash: str = ""
    started: str = field(default_factory=_utc_now)
    finished: Optional[str] = None
    status: str = "running"
    outputs: List[str] = field(default_factory=list)
    versions: dict = field(default_factory=lambda: {
        "diffseg": __version__, "torch": torch.__version__, "numpy": np.__version__,
        "python": platform.python_version()})

    def __post_init__(self):
        if not self.content_hash:
            self.content_hash = content_hash(self.config)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path

    def finish(self, out_dir, outputs, status="ok") -> Path:
        base = Path(out_dir)
        self.outputs = sorted(str(Path(p).relative_to(base)) if Path(p).is_relative_to(base) else str(p)
                              for p in outputs)
        self.finished = _utc_now()
        self.status = status
        return self.write(out_dir)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args, name: str) -> Path:
    return Path(args.out_dir) if args.out_dir else output_root() / name


def _parse_size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW (e.g. 64x64), got {text!r}")
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_dotted(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve_train_config(args) -> TrainConfig:
    """Layered config: library defaults < preset < config file < flags."""
    layered = PRESETS[args.preset]
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            layered = _merge(layered, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
    flags = {"max_steps": args.max_steps, "batch_size": args.batch_size, "learning_rate": args.learning_rate,
             "seed": args.seed, "checkpoint_every": args.checkpoint_every,
             "ablation": getattr(args, "ablation", None)}
    layered = _merge(layered, {k: v for k, v in flags.items() if v is not None})
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(layered, key.strip(), value)
    try:
        return TrainConfig.from_dict(_merge(TrainConfig().to_dict(), layered))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _first_image_size(image_dir: Path):
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            with Image.open(p) as im:
                return im.height, im.width
    raise DataError(f"no images found in {image_dir}")


def resolve_manifest(data: str, split: str, target_size=None, seed: int = 0) -> DatasetManifest:
    """Find the ``split`` of a dataset given a manifest file or a dataset directory.

    Directories may hold ``<split>.manifest`` files, predetermined
    ``<split>/images`` folders, or a flat ``images/`` + ``masks/`` layout that
    is split with ``seed`` (80/20).
    """
    path = Path(data)
    if path.is_file():
        return DatasetManifest.read(path)
    if not path.is_dir():
        raise DataError(f"dataset not found: {path}")
    if (path / f"{split}.manifest").is_file():
        return DatasetManifest.read(path / f"{split}.manifest")
    if (path / split / "images").is_dir():
        size = target_size or _first_image_size(path / split / "images")
        return DatasetManifest.from_directory(path, split, size)
    if (path / "images").is_dir():
        size = target_size or _first_image_size(path / "images")
        train, test = make_split(path, seed=seed, target_size=size)
        return {"train": train, "test": test}[split]
    raise DataError(f"{path} has no {split}.manifest, {split}/images or images/ directory")


def _load_model(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    model, schedule, backbone = restore_model(ckpt)
    patch_size = int(ckpt.get("train_config", {}).get("patch_size", 64))
    return ckpt, model, schedule, backbone, patch_size


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(method=args.method, num_steps=args.steps, seed=args.sample_seed, threshold=args.threshold)


# ---------------------------------------------------------------- subcommands

def cmd_prepare_synthetic(args) -> int:
    out = _out_dir(args, "synthetic")
    manifest = RunManifest("prepare-synthetic", sys.argv[1:], {
        "count": args.count, "size": list(args.size), "seed": args.seed, "test_fraction": args.test_fraction})
    try:
        train, test = generate_synthetic(out, args.count, args.size, args.seed, args.test_fraction)
    except ValueError as exc:
        raise UsageError(str(exc))
    print(f"wrote {len(train.files)} train / {len(test.files)} test images to {out}")
    manifest.finish(out, [out / "train.manifest", out / "test.manifest"])
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    out = _out_dir(args, f"train-{config.ablation}")
    train_m = resolve_manifest(args.data, "train", args.target_size, config.seed)
    test_m = None
    try:
        test_m = resolve_manifest(args.data, "test", args.target_size, config.seed)
    except DataError:
        pass
    manifest = RunManifest("train", sys.argv[1:], config.to_dict())
    manifest.write(out)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    try:
        ckpt, log_path = run_training(config, train_m, out, test_manifest=test_m, resume=not args.no_resume)
    except TrainingDiverged:
        manifest.finish(out, [], status="diverged")
        raise
    outputs = [ckpt, log_path, out / "config.json"]
    records = read_log(log_path)
    if records:
        outputs.append(plots.training_curves(records, out / "training_curves.png"))
    print(f"checkpoint={ckpt}")
    print(f"log={log_path}")
    manifest.finish(out, outputs)
    return EXIT_OK


def _input_images(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if found:
            return found
        raise DataError(f"no images in {path}")
    raise DataError(f"input not found: {path}")


def _read_rgb(path: Path, size=None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def cmd_segment(args) -> int:
    out = _out_dir(args, "segment")
    ckpt, model, schedule, backbone, patch_size = _load_model(args.checkpoint)
    sconf = _sampler_config(args)
    try:
        sconf.validate(schedule)
    except ValueError as exc:
        raise UsageError(str(exc))
    images = _input_images(Path(args.input))
    manifest = RunManifest("segment", sys.argv[1:], {
        "checkpoint": str(args.checkpoint), "variant": ckpt.get("variant"), "sampler": asdict(sconf),
        "size": list(args.size) if args.size else None})
    manifest.write(out)
    outputs, timing = [], []
    for path in images:
        image = _read_rgb(path, args.size)
        h, w = image.shape[:2]
        if h % patch_size or w % patch_size:
            raise DataError(f"{path.name} is {h}x{w}, not a multiple of the {patch_size}px patch size; "
                            f"pass --size to resize")
        seg = segment(model, image, backbone, schedule, sconf, patch_size)
        stem = path.stem
        files = {
            f"{stem}_mask.png": seg.binary * 255,
            f"{stem}_continuous.png": plots.continuous_to_uint8(seg.continuous),
            f"{stem}_overlay.png": plots.overlay_mask(image, seg.binary),
        }
        for name, arr in files.items():
            Image.fromarray(arr.astype(np.uint8)).save(out / name)
            outputs.append(out / name)
        timing.append((stem, seg.seconds, int(seg.binary.sum())))
        print(f"{path.name}: {seg.seconds:.3f}s positive={int(seg.binary.sum())}")
    lines = [f"image.{s}.seconds={sec:.6f}\nimage.{s}.positive_pixels={pos}" for s, sec, pos in timing]
    (out / "timing.txt").write_text("\n".join(lines) + "\n")
    outputs.append(out / "timing.txt")
    manifest.finish(out, outputs)
    return EXIT_OK


def evaluate_checkpoint(checkpoint, data, split="test", sampler: Optional[SamplerConfig] = None,
                        max_images: Optional[int] = None, target_size=None):
    """Segment every image of a split and score it; returns ``(report, samples, predictions)``.

    ``data`` is a :class:`DatasetManifest` or anything :func:`resolve_manifest`
    accepts; flat directories are split with the checkpoint's training seed.
    """
    ckpt, model, schedule, backbone, patch_size = _load_model(checkpoint)
    sampler = sampler or SamplerConfig()
    sampler.validate(schedule)
    if not isinstance(data, DatasetManifest):
        seed = int(ckpt.get("train_config", {}).get("seed", 0))
        data = resolve_manifest(data, split, target_size, seed)
    samples = list(load_dataset(data, patch_size=patch_size))[:max_images or None]
    if not samples:
        raise DataError(f"the {data.split} split under {data.root} is empty")
    preds = []

    def predict(image):
        preds.append(segment(model, image, backbone, schedule, sampler, patch_size).binary)
        return preds[-1]

    return evaluate_dataset(predict, samples), samples, preds


def cmd_eval(args) -> int:
    out = _out_dir(args, "eval")
    sconf = _sampler_config(args)
    manifest = RunManifest("eval", sys.argv[1:], {
        "checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
        "sampler": asdict(sconf), "max_images": args.max_images})
    manifest.write(out)
    try:
        report, samples, preds = evaluate_checkpoint(args.checkpoint, args.data, args.split, sconf,
                                                     args.max_images, args.target_size)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc))
    kv, table = write_report(report, out)
    figs = [plots.score_histograms(report, out / "score_histograms.png"),
            plots.example_grid([s.image for s in samples], [s.mask[..., 0] > 0 for s in samples],
                               preds, [s.id for s in samples],
                               out / "examples.png")]
    sys.stdout.write(report.to_table())
    print(f"iou={report.iou!r}")
    print(f"f1={report.f1!r}")
    manifest.finish(out, [kv, table, *figs])
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = _out_dir(args, "ablation")
    base = resolve_train_config(args)
    manifest = RunManifest("ablate", sys.argv[1:], {"base": base.to_dict(), "variants": args.variants})
    manifest.write(out)
    train_m = resolve_manifest(args.data, "train", args.target_size, base.seed)
    test_m = resolve_manifest(args.data, "test", args.target_size, base.seed)
    sconf = _sampler_config(args)
    scores, outputs = {}, []
    for variant in args.variants:
        config = TrainConfig.from_dict({**base.to_dict(), "ablation": variant})
        vdir = out / variant
        ckpt, log_path = run_training(config, train_m, vdir, test_manifest=test_m)
        report, _, _ = evaluate_checkpoint(ckpt, test_m, "test", sconf, args.max_images)
        kv, table = write_report(report, vdir / "eval")
        outputs += [ckpt, kv, table]
        scores[variant] = {"iou": report.iou, "f1": report.f1}
        print(f"{variant}: iou={report.iou:.4f} f1={report.f1:.4f}")
    lines = [f"{v}.{k}={val!r}" for v, s in scores.items() for k, val in s.items()]
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    header = f"{'variant':<10}{'IoU':>9}{'F1':>9}{'pub. IoU':>10}{'pub. F1':>9}"
    rows = [header, "-" * len(header)]
    ref = REFERENCE_SCORES["LaboroTomato"]
    for v, s in scores.items():
        r = ref.get(v, {})
        rows.append(f"{v:<10}{s['iou']:>9.4f}{s['f1']:>9.4f}"
                    f"{r.get('iou', float('nan')) / 100:>10.4f}{r.get('f1', float('nan')) / 100:>9.4f}")
    (out / "ablation_table.txt").write_text("\n".join(rows) + "\n")
    sys.stdout.write("\n".join(rows) + "\n")
    chart = plots.ablation_chart(scores, out / "ablation.png", reference=ref)
    manifest.finish(out, [*outputs, out / "ablation.txt", out / "ablation_table.txt", chart])
    return EXIT_OK


def cmd_download_weights(args) -> int:
    dest = Path(args.dest)
    try:
        download_weights(dest)
    except OSError as exc:
        raise DataError(f"download failed: {exc}") from exc
    print(f"weights={dest}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="base layer under the config file; 'desk' is a reduced-width CPU model")
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--target-size", type=_parse_size, help="HxW resize for directory datasets")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, dotted for nested ones (denoiser.base_channels=32)")
    p.add_argument("--out-dir")


def _add_sampler_flags(p):
    p.add_argument("--steps", type=int, default=5, help="denoiser evaluations for the ODE solver")
    p.add_argument("--method", choices=[ODE_SOLVER, ANCESTRAL], default=ODE_SOLVER)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffseg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-synthetic", help="write a synthetic fruit segmentation corpus")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_prepare_synthetic)

    p = sub.add_parser("train", help="train one variant")
    _add_train_flags(p)
    p.add_argument("--ablation", choices=VARIANTS)
    p.add_argument("--no-resume", action="store_true", help="ignore checkpoints already in --out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment an image or a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input", help="image file or directory")
    p.add_argument("--size", type=_parse_size, help="resize inputs to HxW first")
    p.add_argument("--out-dir")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--split", default="test")
    p.add_argument("--target-size", type=_parse_size)
    p.add_argument("--max-images", type=int)
    p.add_argument("--out-dir")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every variant with a matched budget")
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--max-images", type=int)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("download-weights", help="fetch the pretrained backbone weights")
    p.add_argument("--dest", default=str(Path.home() / ".cache" / "diffseg" / "wide_resnet50_2.pth"))
    p.set_defaults(func=cmd_download_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"diffseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"diffseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, RuntimeError) as exc:
        print(f"diffseg {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
