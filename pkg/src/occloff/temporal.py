"""Cross-frame fusion of ego-aligned coarse volumes and the upsampling decoder."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import EgoPose, VoxelGridSpec, apply_trilinear, relative_transform, trilinear_table


class TemporalFusion(nn.Module):
    """Per-voxel attention over frames: the current feature is the query,
    every available aligned frame (current included) is a key/value.
    """

    def __init__(self, d_model: int, n_heads: int = 4):
        super().__init__()
        self.n_heads = n_heads
        self.query_proj = nn.Linear(d_model, d_model, bias=False)
        self.key_proj = nn.Linear(d_model, d_model, bias=False)
        self.value_proj = nn.Linear(d_model, d_model, bias=False)
        self.last_weights: torch.Tensor | None = None

    def forward(self, current: torch.Tensor, aligned_past: Sequence[torch.Tensor] = ()) -> torch.Tensor:
        V, D = current.shape
        Hh, d = self.n_heads, D // self.n_heads
        frames = torch.stack([current, *aligned_past], dim=1)  # (V, F, D)
        q = self.query_proj(current).reshape(V, 1, Hh, d)
        k = self.key_proj(frames).reshape(V, -1, Hh, d)
        v = self.value_proj(frames).reshape(V, -1, Hh, d)
        w = torch.softmax((q * k).sum(-1) / math.sqrt(d), dim=1)  # (V, F, H)
        self.last_weights = w
        return (w[..., None] * v).sum(dim=1).reshape(V, D)


def align_history(volumes: Sequence[torch.Tensor], poses: Sequence[EgoPose], grid: VoxelGridSpec,
                  tables: dict | None = None) -> list[torch.Tensor]:
    """Warp every volume except the last into the last pose's ego frame."""
    dst = poses[-1]
    out = []
    for vol, pose in zip(volumes[:-1], poses[:-1]):
        key = (pose.frame_index, dst.frame_index)
        if tables is not None and key in tables:
            idx, w = tables[key]
        else:
            idx, w = trilinear_table(grid, relative_transform(pose, dst))
            if tables is not None:
                tables[key] = (idx, w)
        out.append(apply_trilinear(vol, idx, w))
    return out


def temporal_fuse(volumes: Sequence[torch.Tensor], poses: Sequence[EgoPose], grid: VoxelGridSpec,
                  fusion: TemporalFusion, tables: dict | None = None) -> torch.Tensor:
    """``volumes``/``poses`` ordered oldest to current; missing frames are simply absent."""
    past = align_history(volumes, poses, grid, tables)
    return fusion(volumes[-1], past)


def upsample(volume: torch.Tensor, ratio: int) -> torch.Tensor:
    """Trilinear upsampling of a (D, H, W, Z) volume by an integer ratio."""
    return F.interpolate(volume[None], scale_factor=ratio, mode="trilinear", align_corners=False)[0]


def trilinear_weights_1d(n_in: int, ratio: int) -> np.ndarray:
    """(n_in * ratio, n_in) matrix of the 1-D interpolation weights used by :func:`upsample`."""
    n_out = n_in * ratio
    M = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = max((i + 0.5) / ratio - 0.5, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        M[i, lo] += 1 - frac
        M[i, hi] += frac
    return M


class UpsampleDecoder(nn.Module):
    """Trilinear x S upsampling, two 3x3x3 convolutions, linear head to class logits."""

    def __init__(self, d_model: int, n_classes: int, ratio: int = 2):
        super().__init__()
        self.ratio = ratio
        self.conv1 = nn.Conv3d(d_model, d_model, 3, padding=1)
        self.conv2 = nn.Conv3d(d_model, d_model, 3, padding=1)
        self.head = nn.Linear(d_model, n_classes)

    def forward(self, coarse: torch.Tensor, coarse_dims) -> tuple[torch.Tensor, torch.Tensor]:
        """``coarse`` (V', D) flat -> fine features (V, D) and logits (V, C)."""
        D = coarse.shape[1]
        vol = coarse.T.reshape(D, *coarse_dims)
        x = upsample(vol, self.ratio)
        x = F.relu(self.conv1(x[None]))
        x = F.relu(self.conv2(x))[0]
        fine = x.reshape(D, -1).T
        return fine, self.head(fine)


def upsample_decode(coarse: torch.Tensor, coarse_dims, decoder: UpsampleDecoder):
    return decoder(coarse, coarse_dims)
