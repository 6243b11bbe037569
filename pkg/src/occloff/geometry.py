"""Voxel grids, pinhole cameras, projection and ego-motion alignment.

Frames: ego is x forward, y left, z up. Camera frames are x right, y down,
z along the optical axis. Extrinsics map ego -> camera; poses map
ego(t) -> world.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

EPS_DEPTH = 1e-3


@dataclass(frozen=True)
class VoxelGridSpec:
    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    def coarsen(self, ratio: int) -> "VoxelGridSpec":
        if any(d % ratio for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by ratio {ratio}")
        return VoxelGridSpec(
            tuple(d // ratio for d in self.dims), self.voxel_size * ratio, self.origin
        )

    def centers(self) -> np.ndarray:
        """All voxel centers, shape (H*W*Z, 3), in C order over (h, w, z)."""
        idx = np.indices(self.dims).reshape(3, -1).T
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def point_to_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel index of each point and whether it lies in the grid."""
        rel = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        return idx, inside

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        H, W, Z = self.dims
        idx = np.asarray(idx)
        return (idx[..., 0] * W + idx[..., 1]) * Z + idx[..., 2]

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGridSpec":
        return cls(tuple(d["dims"]), d["voxel_size"], tuple(d["origin"]))


def voxel_center(grid: VoxelGridSpec, index: Sequence[int]) -> np.ndarray:
    index = tuple(int(i) for i in index)
    if len(index) != 3 or any(i < 0 or i >= d for i, d in zip(index, grid.dims)):
        raise IndexError(f"voxel index {index} outside grid dims {grid.dims}")
    return np.asarray(grid.origin) + (np.asarray(index) + 0.5) * grid.voxel_size


def is_rigid(T: np.ndarray, tol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4) or not np.allclose(T[3], [0, 0, 0, 1], atol=tol):
        return False
    R = T[:3, :3]
    return np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1) < tol


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ T[:3, :3].T + T[:3, 3]


@dataclass(frozen=True)
class CameraModel:
    view_index: int
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        E = np.asarray(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0 or abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsics must be an invertible 3x3 matrix with positive focals")
        if not is_rigid(E):
            raise ValueError("extrinsics must be a rigid 4x4 transform")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def project_points(self, points: np.ndarray):
        """Vectorised projection: returns (uv (N,2), depth (N,), visible (N,))."""
        cam = transform_points(self.extrinsics, points)
        depth = cam[:, 2]
        safe = np.where(depth > EPS_DEPTH, depth, 1.0)
        pix = cam @ self.intrinsics.T
        uv = pix[:, :2] / safe[:, None]
        visible = (
            (depth > EPS_DEPTH)
            & (uv[:, 0] >= 0) & (uv[:, 0] < self.width)
            & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)
        )
        return uv, depth, visible

    def backproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Inverse of ``project_points`` for visible points: pixels + depth -> ego."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
        homog = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
        cam = np.linalg.solve(self.intrinsics, homog.T).T * depth[:, None]
        return transform_points(invert_rigid(self.extrinsics), cam)

    def ray_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame origin and unit ray direction through every pixel center (row-major)."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        pix = np.stack([u.ravel() + 0.5, v.ravel() + 0.5, np.ones(u.size)], axis=1)
        d_cam = np.linalg.solve(self.intrinsics, pix.T).T
        R_inv = self.extrinsics[:3, :3].T
        d_ego = d_cam @ R_inv.T
        d_ego /= np.linalg.norm(d_ego, axis=1, keepdims=True)
        origin = invert_rigid(self.extrinsics)[:3, 3]
        return origin, d_ego

    def to_dict(self) -> dict:
        return {
            "view_index": self.view_index,
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["view_index"], np.asarray(d["intrinsics"]), np.asarray(d["extrinsics"]),
                   tuple(d["image_size"]))


def project(p, cam: CameraModel):
    """Project one ego-frame point; None when behind the camera or off-image."""
    uv, depth, visible = cam.project_points(np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not visible[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def hit_views(p, rig: Sequence[CameraModel]) -> set[int]:
    return {cam.view_index for cam in rig if project(p, cam) is not None}


def yaw_camera(view_index: int, yaw: float, image_size=(160, 120), hfov_deg: float = 100.0,
               position=(0.0, 0.0, 0.0)) -> CameraModel:
    """Level pinhole camera looking along ego yaw angle ``yaw`` (radians)."""
    w, h = image_size
    f = (w / 2) / math.tan(math.radians(hfov_deg) / 2)
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ np.asarray(position, dtype=np.float64)
    return CameraModel(view_index, K, E, (w, h))


def make_rig(n_cameras: int = 4, image_size=(160, 120), hfov_deg: float = 100.0) -> list[CameraModel]:
    """Cameras at equal yaw increments; with 4 cameras and 100 deg FOV adjacent frusta overlap."""
    return [yaw_camera(i, 2 * math.pi * i / n_cameras, image_size, hfov_deg) for i in range(n_cameras)]


@dataclass(frozen=True)
class EgoPose:
    frame_index: int
    transform: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.transform, dtype=np.float64)
        if not is_rigid(T):
            raise ValueError("pose must be a rigid 4x4 transform")
        object.__setattr__(self, "transform", T)


def pose_from_xyz_yaw(frame_index: int, x: float, y: float, z: float, yaw: float) -> EgoPose:
    c, s = math.cos(yaw), math.sin(yaw)
    T = np.eye(4)
    T[:3, :3] = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    T[:3, 3] = [x, y, z]
    return EgoPose(frame_index, T)


def relative_transform(pose_src: EgoPose, pose_dst: EgoPose) -> np.ndarray:
    """Maps points expressed in the dst ego frame into the src ego frame."""
    return invert_rigid(pose_src.transform) @ pose_dst.transform


_SNAP = 1e-9


def trilinear_table(grid: VoxelGridSpec, dst_to_src: np.ndarray):
    """Corner indices and weights to resample a volume through a rigid warp.

    For each destination voxel, its center is mapped into the source frame and
    the 8 surrounding source voxel centers are weighted trilinearly. Corners
    outside the grid point at index ``V`` (a zero row); fractional offsets
    within 1e-9 of an integer are snapped so integer shifts are exact.
    """
    centers = grid.centers()
    src = transform_points(dst_to_src, centers)
    cont = (src - np.asarray(grid.origin)) / grid.voxel_size - 0.5
    rounded = np.round(cont)
    cont = np.where(np.abs(cont - rounded) < _SNAP, rounded, cont)
    base = np.floor(cont).astype(np.int64)
    frac = cont - base
    dims = np.asarray(grid.dims)
    V = grid.n_voxels
    idx = np.empty((len(centers), 8), dtype=np.int64)
    w = np.empty((len(centers), 8))
    for c in range(8):
        off = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
        corner = base + off
        wc = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        inside = np.all((corner >= 0) & (corner < dims), axis=1)
        flat = grid.flat_index(np.clip(corner, 0, dims - 1))
        idx[:, c] = np.where(inside, flat, V)
        w[:, c] = np.where(inside, wc, 0.0)
    return idx, w


def apply_trilinear(features: torch.Tensor, idx: np.ndarray, w: np.ndarray) -> torch.Tensor:
    """Resample flat features (V, D) with a table from :func:`trilinear_table`."""
    padded = torch.cat([features, features.new_zeros(1, features.shape[1])], dim=0)
    idx_t = torch.as_tensor(idx, device=features.device)
    w_t = torch.as_tensor(w, dtype=features.dtype, device=features.device)
    gathered = padded[idx_t]  # (V, 8, D)
    # zero-weight corners are skipped exactly so identity warps reproduce values bitwise
    return torch.where(w_t[..., None] != 0, gathered * w_t[..., None], 0.0).sum(dim=1)


def align_volume(features: torch.Tensor, pose_src: EgoPose, pose_dst: EgoPose,
                 grid: VoxelGridSpec) -> torch.Tensor:
    """Warp flat volume features (V, D) from the src ego frame into the dst ego frame."""
    idx, w = trilinear_table(grid, relative_transform(pose_src, pose_dst))
    return apply_trilinear(features, idx, w)
