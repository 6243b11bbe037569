"""Slice images of occupancy grids and entropy-mask overlays (PNG, lossless).

Grids are drawn as horizontal slices: image rows follow the grid's first
axis (ego x), columns its second (ego y). All Z layers are tiled left to
right, bottom layer first. Colours come from ``synthdata.PALETTE``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .fusion import EntropyMask
from .geometry import VoxelGridSpec
from .synthdata import PALETTE

MASK_COLOR = np.array([255, 0, 0], dtype=np.uint8)


def palette_u8() -> np.ndarray:
    return np.clip(np.round(PALETTE * 255.0), 0, 255).astype(np.uint8)


def _upscale(img: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def slice_image(labels: np.ndarray, z: int, scale: int = 1) -> np.ndarray:
    """(H * scale, W * scale, 3) uint8 image of layer ``z``."""
    return _upscale(palette_u8()[np.asarray(labels)[:, :, z]], scale)


def tiled_slices(labels: np.ndarray, scale: int = 1) -> np.ndarray:
    labels = np.asarray(labels)
    return np.concatenate([slice_image(labels, z, scale) for z in range(labels.shape[2])], axis=1)


def mask_overlay(mask: EntropyMask, grid: VoxelGridSpec, scale: int = 1) -> np.ndarray:
    """Entropy as grey levels, selected voxels painted solid red; Z layers tiled."""
    ent = mask.entropies.reshape(grid.dims)
    hi = ent.max() if ent.size and ent.max() > 0 else 1.0
    grey = np.round(255.0 * ent / hi).astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, axis=-1)
    sel = mask.as_bool().reshape(grid.dims)
    rgb[sel] = MASK_COLOR
    # entropy never renders as pure red, so marked pixels are exactly the mask
    rgb[~sel & np.all(rgb == MASK_COLOR, axis=-1)] = (254, 0, 0)
    return np.concatenate([_upscale(rgb[:, :, z], scale) for z in range(grid.dims[2])], axis=1)


def count_marked(img: np.ndarray) -> int:
    return int(np.all(img == MASK_COLOR, axis=-1).sum())


def save_png(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings keep files byte-identical across runs
    Image.fromarray(np.ascontiguousarray(img)).save(path, format="PNG", optimize=False, compress_level=6)
    return path


def write_visualization(out_dir, gt: np.ndarray, pred: np.ndarray,
                        masks: list[list[tuple[str, EntropyMask]]], coarse: VoxelGridSpec,
                        scale: int = 4) -> list[Path]:
    """gt.png, pred.png and one overlay per (layer, branch) mask.

    ``masks[layer]`` lists ``(branch_name, mask)`` pairs.
    """
    out_dir = Path(out_dir)
    files = [save_png(tiled_slices(gt, scale), out_dir / "gt.png"),
             save_png(tiled_slices(pred, scale), out_dir / "pred.png")]
    for layer, layer_masks in enumerate(masks):
        for branch, m in layer_masks:
            files.append(save_png(mask_overlay(m, coarse, scale), out_dir / f"mask_layer{layer}_{branch}.png"))
    return files
