"""Non-overlapping tiling of H x W x C arrays and exact reassembly."""

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    original_height: int
    original_width: int

    def __post_init__(self):
        if self.rows * self.patch_size != self.original_height or \
                self.cols * self.patch_size != self.original_width:
            raise ValueError(
                f"grid {self.rows}x{self.cols} of {self.patch_size}px tiles does not cover "
                f"{self.original_height}x{self.original_width}"
            )

    def __len__(self):
        return self.rows * self.cols

    def origin(self, index: int):
        """Top-left pixel of the ``index``-th tile in row-major order."""
        r, c = divmod(index, self.cols)
        return r * self.patch_size, c * self.patch_size


def _stack(arrays):
    if isinstance(arrays[0], torch.Tensor):
        return torch.stack(list(arrays))
    return np.stack(arrays)


def split(image, patch_size: int = 64):
    """Cut ``image`` (H x W x C) into row-major tiles.

    Returns ``(patches, grid)``. Raises ``ValueError`` if H or W is not a
    multiple of ``patch_size``; resize the image first in that case.
    """
    if image.ndim != 3:
        raise ValueError(f"expected an H x W x C array, got shape {tuple(image.shape)}")
    if patch_size < 1:
        raise ValueError("patch_size must be positive")
    h, w = int(image.shape[0]), int(image.shape[1])
    if h % patch_size or w % patch_size:
        raise ValueError(
            f"image of size {h}x{w} is not divisible into {patch_size}x{patch_size} patches; "
            f"resize it to a multiple of {patch_size} first"
        )
    grid = PatchGrid(patch_size, h // patch_size, w // patch_size, h, w)
    patches = []
    for i in range(len(grid)):
        r0, c0 = grid.origin(i)
        patches.append(image[r0:r0 + patch_size, c0:c0 + patch_size])
    return patches, grid


def stitch(patches, grid: PatchGrid):
    """Inverse of :func:`split`."""
    if len(patches) != len(grid):
        raise ValueError(f"expected {len(grid)} patches for a {grid.rows}x{grid.cols} grid, got {len(patches)}")
    p = grid.patch_size
    channels = patches[0].shape[-1] if patches[0].ndim == 3 else None
    for i, patch in enumerate(patches):
        if patch.ndim != 3 or tuple(patch.shape[:2]) != (p, p) or patch.shape[2] != channels:
            raise ValueError(f"patch {i} has shape {tuple(patch.shape)}, expected ({p}, {p}, {channels})")
    stacked = _stack(patches)  # (rows*cols, p, p, C)
    stacked = stacked.reshape(grid.rows, grid.cols, p, p, channels)
    if isinstance(stacked, torch.Tensor):
        out = stacked.permute(0, 2, 1, 3, 4)
    else:
        out = stacked.transpose(0, 2, 1, 3, 4)
    return out.reshape(grid.original_height, grid.original_width, channels)
