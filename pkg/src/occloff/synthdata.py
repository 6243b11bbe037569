"""Procedural scenes with long-tailed semantics, ray-cast LiDAR and rendered views.

Category 0 is empty, category 1 the ground plane, categories 2..8 are
object classes whose sizes shrink as they get rarer. Objects are static;
only the ego moves.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import (
    CameraModel,
    EgoPose,
    VoxelGridSpec,
    invert_rigid,
    make_rig,
    pose_from_xyz_yaw,
    transform_points,
)

N_CLASSES = 8
GROUND = 1
EGO_HEIGHT = 2.0
LIDAR_NOISE = 0.02
PIXEL_NOISE = 0.05
LIDAR_MAX_RANGE = 60.0

# RGB per label; index 0 doubles as the sky/background color.
PALETTE = np.array([
    [0.55, 0.75, 0.95],
    [0.45, 0.45, 0.45],
    [0.80, 0.40, 0.20],
    [0.20, 0.70, 0.20],
    [0.15, 0.30, 0.85],
    [0.90, 0.85, 0.10],
    [0.80, 0.20, 0.70],
    [0.90, 0.10, 0.10],
    [0.10, 0.85, 0.85],
])

DEFAULT_FREQUENCIES = (0.55, 0.20, 0.10, 0.06, 0.04, 0.03, 0.015, 0.005)

# category -> (kind, parameter ranges); boxes give half sizes, cylinders
# (radius, height), spheres (radius,)
TEMPLATES = {
    2: ("box", ((1.25, 2.0), (1.25, 2.0), (1.0, 1.5))),
    3: ("cylinder", ((1.0, 1.5), (2.5, 3.5))),
    4: ("box", ((1.75, 2.25), (0.8, 1.0), (0.7, 0.85))),
    5: ("sphere", ((1.0, 1.3),)),
    6: ("box", ((0.75, 1.0), (0.35, 0.5), (0.5, 0.7))),
    7: ("cylinder", ((0.4, 0.5), (1.5, 1.9))),
    8: ("sphere", ((0.5, 0.6),)),
}


@dataclass(frozen=True)
class Primitive:
    kind: int
    params: tuple[float, ...]
    category: int

    def contains(self, pts: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == kernels.PLANE:
            return pts[:, 2] <= p[0]
        if self.kind == kernels.BOX:
            return np.all(np.abs(pts - np.asarray(p[:3])) <= np.asarray(p[3:6]), axis=1)
        if self.kind == kernels.CYLINDER:
            r2 = (pts[:, 0] - p[0]) ** 2 + (pts[:, 1] - p[1]) ** 2
            return (r2 <= p[4] ** 2) & (pts[:, 2] >= p[2]) & (pts[:, 2] <= p[3])
        d2 = ((pts - np.asarray(p[:3])) ** 2).sum(axis=1)
        return d2 <= p[3] ** 2

    def footprint_radius(self) -> float:
        p = self.params
        if self.kind == kernels.BOX:
            return math.hypot(p[3], p[4])
        if self.kind == kernels.CYLINDER:
            return p[4]
        if self.kind == kernels.SPHERE:
            return p[3]
        return math.inf

    def xy(self) -> tuple[float, float]:
        return self.params[0], self.params[1]


def _pack(surfaces: Sequence[Primitive]):
    kinds = np.array([s.kind for s in surfaces], dtype=np.int32)
    params = np.zeros((len(surfaces), 6))
    for i, s in enumerate(surfaces):
        params[i, :len(s.params)] = s.params
    return kinds, params


def raycast_scene(surfaces: Sequence[Primitive], origins, dirs, t_max=np.inf):
    """First-hit distance and surface index per ray (world frame)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    if len(surfaces) == 0 or len(dirs) == 0:
        return np.full(len(dirs), np.inf), np.full(len(dirs), -1, dtype=np.int64)
    kinds, params = _pack(surfaces)
    return kernels.raycast(origins, dirs, kinds, params, float(t_max))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    n_objects: int = 12
    class_frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES
    sequence_length: int = 4
    rig: tuple[CameraModel, ...] = field(default_factory=lambda: tuple(make_rig()))
    grid: VoxelGridSpec = field(
        default_factory=lambda: VoxelGridSpec((64, 64, 16), 0.5, (-16.0, -16.0, -4.0))
    )
    lidar_rays: int = 4096
    sweeps_per_frame: int = 3
    lidar_beams: int = 16
    lidar_elevation_deg: tuple[float, float] = (-30.0, 10.0)
    ego_speed: float = 1.0
    max_yaw_rate: float = 0.05
    placement_retries: int = 200

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.class_frequencies)
        if len(freqs) != N_CLASSES or min(freqs) < 0 or abs(sum(freqs) - 1.0) > 1e-6:
            raise ValueError(f"class_frequencies must be {N_CLASSES} non-negative values summing to 1")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.n_objects < 0 or self.lidar_rays < 0 or self.sweeps_per_frame < 1:
            raise ValueError("n_objects, lidar_rays must be >= 0 and sweeps_per_frame >= 1")
        object.__setattr__(self, "class_frequencies", freqs)
        object.__setattr__(self, "rig", tuple(self.rig))


@dataclass
class OccupancyGrid:
    grid: VoxelGridSpec
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.shape != self.grid.dims:
            raise ValueError(f"labels shape {self.labels.shape} != grid dims {self.grid.dims}")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > N_CLASSES:
            raise ValueError("labels outside 0..N_cls")


@dataclass
class SceneSample:
    frame_index: int
    images: np.ndarray  # (views, height, width, 3) uint8
    points: np.ndarray  # (N, 3) ego frame
    gt: OccupancyGrid
    pose: EgoPose


class Trajectory:
    """Constant speed, constant yaw-rate ego motion evaluated at continuous time."""

    def __init__(self, speed: float, yaw0: float, yaw_rate: float, height: float = EGO_HEIGHT):
        self.speed, self.yaw0, self.yaw_rate, self.height = speed, yaw0, yaw_rate, height

    def state(self, t: float) -> tuple[float, float, float]:
        w, v, y0 = self.yaw_rate, self.speed, self.yaw0
        yaw = y0 + w * t
        if abs(w) < 1e-12:
            return v * t * math.cos(y0), v * t * math.sin(y0), yaw
        x = v / w * (math.sin(yaw) - math.sin(y0))
        y = -v / w * (math.cos(yaw) - math.cos(y0))
        return x, y, yaw

    def pose(self, t: float, frame_index: int = 0) -> EgoPose:
        x, y, yaw = self.state(t)
        return pose_from_xyz_yaw(frame_index, x, y, self.height, yaw)


def draw_categories(freqs: Sequence[float], n: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic draw of n object categories from the object-class frequencies.

    Each category gets floor or ceil of its expected count, which keeps the
    long tail visible even in small scenes.
    """
    probs = np.asarray(freqs[1:], dtype=np.float64)
    probs = probs / probs.sum()
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    u = (rng.random() + np.arange(n)) / max(n, 1)
    cats = np.searchsorted(cdf, u, side="right") + 2
    return rng.permutation(np.minimum(cats, N_CLASSES))


def _make_object(cat: int, x: float, y: float, rng: np.random.Generator) -> Primitive:
    kind, ranges = TEMPLATES[cat]
    vals = [rng.uniform(lo, hi) for lo, hi in ranges]
    if kind == "box":
        hx, hy, hz = vals
        if rng.random() < 0.5:
            hx, hy = hy, hx
        return Primitive(kernels.BOX, (x, y, hz, hx, hy, hz), cat)
    if kind == "cylinder":
        r, h = vals
        return Primitive(kernels.CYLINDER, (x, y, 0.0, h, r), cat)
    (r,) = vals
    return Primitive(kernels.SPHERE, (x, y, r, r), cat)


def build_scene(spec: SceneSpec, rng: np.random.Generator):
    """Trajectory plus ground and placed objects (world frame)."""
    yaw_rate = rng.uniform(-spec.max_yaw_rate, spec.max_yaw_rate)
    traj = Trajectory(spec.ego_speed, rng.uniform(-math.pi, math.pi), yaw_rate)
    t_first = -(spec.sweeps_per_frame - 1) / spec.sweeps_per_frame
    times = np.linspace(t_first, spec.sequence_length - 1, 4 * spec.sequence_length + 1)
    path = np.array([traj.state(t)[:2] for t in times])
    mid = path[len(path) // 2]
    half = 0.5 * min(spec.grid.extent[0], spec.grid.extent[1]) - 1.0

    surfaces = [Primitive(kernels.PLANE, (0.0,), GROUND)]
    placed: list[Primitive] = []
    for cat in draw_categories(spec.class_frequencies, spec.n_objects, rng):
        for _ in range(spec.placement_retries):
            x, y = mid + rng.uniform(-half, half, size=2)
            obj = _make_object(int(cat), float(x), float(y), rng)
            r = obj.footprint_radius()
            if np.min(np.hypot(path[:, 0] - x, path[:, 1] - y)) < r + 2.5:
                continue
            if any(math.hypot(o.xy()[0] - x, o.xy()[1] - y) < r + o.footprint_radius() + 0.5
                   for o in placed):
                continue
            placed.append(obj)
            break
        else:
            raise ValueError(
                f"could not place {spec.n_objects} objects without overlap "
                f"after {spec.placement_retries} retries each"
            )
    return traj, surfaces + placed


def voxelize_gt(surfaces: Sequence[Primitive], grid: VoxelGridSpec, pose: EgoPose) -> OccupancyGrid:
    """Label each voxel by the primitive containing its center; ground is a one-voxel slab."""
    centers = transform_points(pose.transform, grid.centers())
    labels = np.zeros(grid.n_voxels, dtype=np.uint8)
    for s in surfaces:
        if s.kind == kernels.PLANE:
            inside = (centers[:, 2] <= s.params[0]) & (centers[:, 2] >= s.params[0] - grid.voxel_size)
        else:
            inside = s.contains(centers)
        labels[inside] = s.category
    return OccupancyGrid(grid, labels.reshape(grid.dims))


def lidar_directions(n_rays: int, n_beams: int = 16, elevation_deg=(-30.0, 10.0)) -> np.ndarray:
    """Unit ray directions in the ego frame, beam-major within each azimuth column."""
    if n_rays <= 0:
        return np.zeros((0, 3))
    n_beams = max(1, min(n_beams, n_rays))
    n_az = math.ceil(n_rays / n_beams)
    r = np.arange(n_rays)
    elev = np.radians(np.linspace(elevation_deg[0], elevation_deg[1], n_beams))[r % n_beams]
    az = 2 * math.pi * (r // n_beams) / n_az
    return np.stack([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)], axis=1)


def cast_lidar_rays(surfaces, origin, dirs, rng: np.random.Generator, noise=LIDAR_NOISE,
                    max_range=LIDAR_MAX_RANGE) -> np.ndarray:
    """First-hit points (frame of ``origin``/``dirs``) with Gaussian range noise."""
    t, hit = raycast_scene(surfaces, origin, dirs, max_range)
    ok = hit >= 0
    if not ok.any():
        return np.zeros((0, 3))
    rng_noise = rng.normal(0.0, noise, size=int(ok.sum()))
    return np.asarray(origin) + (t[ok] + rng_noise)[:, None] * dirs[ok]


def sample_lidar(surfaces, pose: EgoPose, n_rays: int, rng: np.random.Generator,
                 n_beams: int = 16, elevation_deg=(-30.0, 10.0)) -> np.ndarray:
    """One sweep from the ego sensor origin; points in that pose's ego frame."""
    if n_rays <= 0 or len(surfaces) == 0:
        return np.zeros((0, 3))
    dirs_ego = lidar_directions(n_rays, n_beams, elevation_deg)
    R, t = pose.transform[:3, :3], pose.transform[:3, 3]
    world = cast_lidar_rays(surfaces, t, dirs_ego @ R.T, rng)
    return transform_points(invert_rigid(pose.transform), world)


def render_views(surfaces, rig: Sequence[CameraModel], pose: EgoPose,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-view uint8 images: flat category colors, depth-ordered, plus pixel noise."""
    R, tr = pose.transform[:3, :3], pose.transform[:3, 3]
    out = []
    for cam in rig:
        origin, dirs = cam.ray_directions()
        _, hit = raycast_scene(surfaces, R @ origin + tr, dirs @ R.T)
        cats = np.array([s.category for s in surfaces] + [0], dtype=np.int64)[hit]
        img = PALETTE[cats] + rng.normal(0.0, PIXEL_NOISE, size=(len(cats), 3))
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        out.append(img.reshape(cam.height, cam.width, 3))
    return np.stack(out)


def generate_sequence(spec: SceneSpec) -> list[SceneSample]:
    rng = np.random.default_rng(spec.seed)
    traj, surfaces = build_scene(spec, rng)
    samples = []
    S = spec.sweeps_per_frame
    for t in range(spec.sequence_length):
        pose = traj.pose(float(t), t)
        images = render_views(surfaces, spec.rig, pose, rng)
        sweeps = []
        for j in range(S):
            sweep_pose = traj.pose(t - j / S, t)
            pts = sample_lidar(surfaces, sweep_pose, spec.lidar_rays, rng,
                               spec.lidar_beams, spec.lidar_elevation_deg)
            rel = invert_rigid(pose.transform) @ sweep_pose.transform
            sweeps.append(transform_points(rel, pts))
        points = np.concatenate(sweeps).astype(np.float32)
        samples.append(SceneSample(t, images, points, voxelize_gt(surfaces, spec.grid, pose), pose))
    return samples


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

FORMAT = "occloff-dataset"
FORMAT_VERSION = 1
LAYOUT = {
    "images": "uint8, little-endian raw, shape (frames, views, height, width, 3), C order",
    "points": "float32 little-endian raw, shape (total_points, 3), frames concatenated in order; "
              "per-frame counts in point_counts",
    "labels": "uint8 raw, shape (frames, H, W, Z), C order",
}


def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "seed": spec.seed,
        "n_objects": spec.n_objects,
        "class_frequencies": list(spec.class_frequencies),
        "sequence_length": spec.sequence_length,
        "lidar_rays": spec.lidar_rays,
        "sweeps_per_frame": spec.sweeps_per_frame,
        "lidar_beams": spec.lidar_beams,
        "lidar_elevation_deg": list(spec.lidar_elevation_deg),
        "ego_speed": spec.ego_speed,
        "max_yaw_rate": spec.max_yaw_rate,
        "placement_retries": spec.placement_retries,
    }


def write_sequence(seq_dir: Path, samples: Sequence[SceneSample]) -> dict:
    seq_dir.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.images for s in samples])
    labels = np.stack([s.gt.labels for s in samples]).astype(np.uint8)
    points = np.concatenate([s.points for s in samples]).astype("<f4")
    (seq_dir / "images.bin").write_bytes(images.tobytes())
    (seq_dir / "labels.bin").write_bytes(labels.tobytes())
    (seq_dir / "points.bin").write_bytes(points.tobytes())
    return {
        "poses": [s.pose.transform.tolist() for s in samples],
        "point_counts": [int(len(s.points)) for s in samples],
        "arrays": {
            "images": {"file": "images.bin", "dtype": "|u1", "shape": list(images.shape)},
            "labels": {"file": "labels.bin", "dtype": "|u1", "shape": list(labels.shape)},
            "points": {"file": "points.bin", "dtype": "<f4", "shape": list(points.shape)},
        },
    }


def write_dataset(out_dir, specs: Sequence[SceneSpec], splits: Sequence[str], extra: dict | None = None) -> Path:
    """Generate and write sequences; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not specs:
        raise ValueError("no sequences requested")
    sequences = []
    for i, (spec, split) in enumerate(zip(specs, splits)):
        name = f"seq_{i:04d}"
        entry = write_sequence(out_dir / name, generate_sequence(spec))
        sequences.append({"name": name, "split": split, "spec": spec_to_dict(spec), **entry})
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "n_classes": N_CLASSES,
        "grid": specs[0].grid.to_dict(),
        "rig": [c.to_dict() for c in specs[0].rig],
        "layout": LAYOUT,
        "palette": PALETTE.tolist(),
        "sequences": sequences,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _read_array(seq_dir: Path, desc: dict) -> np.ndarray:
    data = np.frombuffer((seq_dir / desc["file"]).read_bytes(), dtype=np.dtype(desc["dtype"]))
    return data.reshape(desc["shape"])


@dataclass
class SequenceData:
    name: str
    split: str
    images: np.ndarray
    points: list[np.ndarray]
    labels: np.ndarray
    poses: list[EgoPose]


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("format") != FORMAT:
            raise ValueError(f"{path} is not an {FORMAT} manifest")
        self.grid = VoxelGridSpec.from_dict(self.manifest["grid"])
        self.rig = [CameraModel.from_dict(c) for c in self.manifest["rig"]]
        self._cache: dict[str, SequenceData] = {}

    def names(self, split: str | None = None) -> list[str]:
        return [s["name"] for s in self.manifest["sequences"] if split is None or s["split"] == split]

    def load(self, name: str) -> SequenceData:
        if name not in self._cache:
            entry = next(s for s in self.manifest["sequences"] if s["name"] == name)
            seq_dir = self.root / name
            arrays = entry["arrays"]
            pts = _read_array(seq_dir, arrays["points"]).astype(np.float64)
            splits = np.cumsum(entry["point_counts"])[:-1]
            self._cache[name] = SequenceData(
                name=name,
                split=entry["split"],
                images=_read_array(seq_dir, arrays["images"]),
                points=np.split(pts, splits),
                labels=_read_array(seq_dir, arrays["labels"]),
                poses=[EgoPose(i, np.asarray(T)) for i, T in enumerate(entry["poses"])],
            )
        return self._cache[name]
