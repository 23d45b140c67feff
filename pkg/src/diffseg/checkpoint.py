"""Versioned checkpoint files: parameters plus everything needed to rebuild the model.

The payload is a nested tree of dicts, lists, scalars and tensors. Tensors go
into a safetensors container; the rest of the tree is stored as ordered JSON
in its metadata. Unlike pickling, this encoding depends only on values, so
save -> load -> save reproduces the file byte for byte.
"""

import json
from pathlib import Path
import re

from safetensors import SafetensorError, safe_open
from safetensors.torch import load as st_load, save as st_save
import torch

from .diffusion import NoiseSchedule
from .features import build_backbone
from .network import ConditionalUNet, DenoiserConfig

FORMAT = "diffseg-checkpoint"
VERSION = 1
_NAME = re.compile(r"checkpoint_step(\d+)\.pt$")


class CheckpointError(Exception):
    pass


def checkpoint_name(step: int) -> str:
    return f"checkpoint_step{int(step):07d}.pt"


def latest_checkpoint(directory):
    """Highest-step checkpoint in ``directory`` or None."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    found = [(int(m.group(1)), p) for p in directory.iterdir() if (m := _NAME.search(p.name))]
    return max(found)[1] if found else None


def _encode(obj, tensors: dict):
    if isinstance(obj, torch.Tensor):
        name = f"t{len(tensors):06d}"
        tensors[name] = obj.detach().cpu().contiguous().clone()
        return {"tensor": name}
    if isinstance(obj, dict):
        # key types (e.g. optimizer state ids) and order are both preserved
        return {"dict": [[_encode(k, tensors), _encode(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"tuple": [_encode(v, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, tensors) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot store {type(obj).__name__} in a checkpoint")


def _decode(node, tensors: dict):
    if isinstance(node, list):
        return [_decode(v, tensors) for v in node]
    if isinstance(node, dict):
        if "tensor" in node:
            return tensors[node["tensor"]]
        if "tuple" in node:
            return tuple(_decode(v, tensors) for v in node["tuple"])
        return {_decode(k, tensors): _decode(v, tensors) for k, v in node["dict"]}
    return node


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    tree = _encode({"format": FORMAT, "version": VERSION, **payload}, tensors)
    blob = st_save(tensors, metadata={"tree": json.dumps(tree, separators=(",", ":"))})
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        tensors = st_load(path.read_bytes())
        with safe_open(path, framework="pt") as f:
            meta = f.metadata() or {}
        ckpt = _decode(json.loads(meta["tree"]), tensors)
    except (SafetensorError, KeyError, ValueError, OSError) as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if ckpt.get("version") != VERSION:
        raise CheckpointError(f"{path} has format version {ckpt.get('version')}, expected {VERSION}")
    return ckpt


def restore_model(ckpt: dict):
    """Rebuild ``(model, schedule, backbone)`` from a loaded checkpoint."""
    config = DenoiserConfig.from_dict(ckpt["denoiser_config"])
    model = ConditionalUNet(config)
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    schedule = NoiseSchedule.from_metadata(ckpt["schedule"])
    backbone = None
    if config.use_mappers:
        backbone = build_backbone(ckpt["backbone"])
        if ckpt.get("backbone_state") is not None:
            backbone.load_state_dict(ckpt["backbone_state"])
    return model, schedule, backbone
