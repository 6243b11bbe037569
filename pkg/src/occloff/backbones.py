"""Toy image pyramid encoder and LiDAR voxel encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import VoxelGridSpec
from .sparse import SparseConv3d, neighbor_table, scatter_rows

N_LEVELS = 3


@dataclass
class ImageFeaturePyramid:
    """levels[l - 1] has shape (views, D, Y_l, X_l); level 1 is the shallowest."""

    levels: list[torch.Tensor]

    def level(self, l: int) -> torch.Tensor:
        return self.levels[l - 1]

    @property
    def top(self) -> torch.Tensor:
        return self.levels[-1]


@dataclass
class VoxelFeatureVolume:
    grid: VoxelGridSpec
    features: torch.Tensor  # (V, D), C order over grid dims
    occupancy_mask: np.ndarray  # (V,) bool

    def dense(self) -> torch.Tensor:
        """(D, H, W, Z) view of the features."""
        return self.features.T.reshape(-1, *self.grid.dims)


def level_shapes(width: int, height: int, n_levels: int = N_LEVELS) -> list[tuple[int, int]]:
    shapes = []
    for _ in range(n_levels):
        width, height = -(-width // 2), -(-height // 2)
        shapes.append((width, height))
    return shapes


class ImageEncoder(nn.Module):
    """Three conv -> ReLU -> 2x average-pool stages with 1x1 heads to D channels."""

    def __init__(self, d_model: int, hidden: int | None = None, bias: bool = True):
        super().__init__()
        hidden = hidden or d_model
        chans = [3] + [hidden] * N_LEVELS
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=bias) for i in range(N_LEVELS)
        )
        self.heads = nn.ModuleList(nn.Conv2d(hidden, d_model, 1, bias=bias) for _ in range(N_LEVELS))

    def forward(self, images: torch.Tensor) -> ImageFeaturePyramid:
        """``images``: (views, 3, height, width) float."""
        x = images
        levels = []
        for conv, head in zip(self.stages, self.heads):
            x = F.avg_pool2d(F.relu(conv(x)), 2, ceil_mode=True)
            levels.append(head(x))
        return ImageFeaturePyramid(levels)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 (views, H, W, 3) -> centred float (views, 3, H, W)."""
    x = torch.from_numpy(np.array(images, copy=True)).to(dtype) / 255.0 - 0.5
    return x.permute(0, 3, 1, 2).contiguous()


@dataclass
class PooledVoxels:
    grid: VoxelGridSpec
    active: np.ndarray  # (A,) sorted flat indices of voxels holding >= 1 point
    stats: np.ndarray  # (A, 5): count, mean offset from center (x, y, z) in m, mean height in m
    neighbors: np.ndarray  # (A, 27) submanifold neighbour table over active sites

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid.n_voxels, dtype=bool)
        m[self.active] = True
        return m


def pool_points(points: np.ndarray, grid: VoxelGridSpec) -> PooledVoxels:
    """Per-voxel point statistics; invariant to input point order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx, inside = grid.point_to_index(points)
    points, flat = points[inside], grid.flat_index(idx[inside])
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0], flat))
    points, flat = points[order], flat[order]
    active, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    centers = grid.centers()[active]
    sums = np.zeros((len(active), 3))
    for a in range(3):
        sums[:, a] = np.bincount(inverse, weights=points[:, a], minlength=len(active))
    means = sums / np.maximum(counts, 1)[:, None]
    stats = np.concatenate([counts[:, None], means - centers, means[:, 2:3]], axis=1)
    V = grid.n_voxels
    nbr = neighbor_table(grid.dims, active)
    # restrict neighbours to active sites: inactive ones read the zero row
    lookup = np.full(V + 1, len(active), dtype=np.int64)
    lookup[active] = np.arange(len(active))
    return PooledVoxels(grid, active, stats, lookup[nbr])


class LidarEncoder(nn.Module):
    """Linear embedding of pooled statistics + two submanifold 3x3x3 convolutions."""

    def __init__(self, d_model: int):
        super().__init__()
        self.embed = nn.Linear(5, d_model)
        self.conv1 = SparseConv3d(d_model, d_model)
        self.conv2 = SparseConv3d(d_model, d_model)
        self.empty = nn.Parameter(torch.zeros(d_model))
        nn.init.normal_(self.empty, std=0.1)

    def normalized_stats(self, pooled: PooledVoxels) -> torch.Tensor:
        s = pooled.stats
        feats = np.concatenate([
            np.log1p(s[:, :1]),
            s[:, 1:4] / pooled.grid.voxel_size,
            s[:, 4:5] / 4.0,
        ], axis=1)
        return torch.as_tensor(feats, dtype=self.empty.dtype)

    def forward(self, pooled: PooledVoxels) -> VoxelFeatureVolume:
        V, A = pooled.grid.n_voxels, len(pooled.active)
        out = self.empty.expand(V, -1)
        if A:
            h = self.embed(self.normalized_stats(pooled))
            h = F.relu(self.conv1(h, pooled.neighbors))
            h = self.conv2(h, pooled.neighbors)
            out = out.index_copy(0, torch.as_tensor(pooled.active), h)
        return VoxelFeatureVolume(pooled.grid, out, pooled.mask)


def encode_lidar(points: np.ndarray, grid: VoxelGridSpec, encoder: LidarEncoder) -> VoxelFeatureVolume:
    return encoder(pool_points(points, grid))


def encode_images(images: np.ndarray, encoder: ImageEncoder) -> ImageFeaturePyramid:
    return encoder(images_to_tensor(images, encoder.heads[0].weight.dtype))


__all__ = [
    "ImageEncoder", "ImageFeaturePyramid", "LidarEncoder", "PooledVoxels", "VoxelFeatureVolume",
    "encode_images", "encode_lidar", "images_to_tensor", "level_shapes", "pool_points", "scatter_rows",
]
