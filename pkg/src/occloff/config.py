"""Run configuration: one YAML document with scene, model, loss, AHSW and
training sections. Unknown keys are rejected before any work starts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .geometry import VoxelGridSpec, make_rig
from .synthdata import DEFAULT_FREQUENCIES, SceneSpec


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value)."""


@dataclass
class GridConfig:
    dims: list[int] = field(default_factory=lambda: [64, 64, 16])
    voxel_size: float = 0.5
    origin: list[float] = field(default_factory=lambda: [-16.0, -16.0, -4.0])


@dataclass
class SceneConfig:
    n_objects: int = 12
    class_frequencies: list[float] = field(default_factory=lambda: list(DEFAULT_FREQUENCIES))
    sequence_length: int = 4
    lidar_rays: int = 4096
    lidar_beams: int = 16
    sweeps_per_frame: int = 3
    image_size: list[int] = field(default_factory=lambda: [160, 120])
    n_cameras: int = 4
    hfov_deg: float = 100.0
    ego_speed: float = 1.0
    grid: GridConfig = field(default_factory=GridConfig)


@dataclass
class DataConfig:
    n_train: int = 64
    n_val: int = 16
    val_seed_offset: int = 100000


@dataclass
class ModelConfig:
    scale: str = "base"  # small | base | dense
    d_model: int = 32
    upsample_ratio: int = 2
    k_percent: float = 35.0
    n_layers: int | None = None  # None -> 2 for small, 3 otherwise
    da_heads: int = 4
    da_points: int = 8
    ssca_heads: int = 4
    tau: int = 5
    theta: int = 20
    shallow_levels: list[int] = field(default_factory=lambda: [1, 2])
    temporal_frames: int = 3
    temporal_heads: int = 4


@dataclass
class LossConfig:
    alpha: float = 6.0
    beta: float = 12.0
    proxy_max_voxels: int = 4096
    proxy_init_std: float = 0.1
    aux_weight: float = 0.25


@dataclass
class AHSWConfig:
    warmup: int = 10
    sample_percent: float = 70.0
    amplification: float = 5.0
    decay: float = 0.5


@dataclass
class AblationConfig:
    proxy_loss: bool = True
    ahsw: bool = True
    gsca: bool = True
    ssca: bool = True
    temporal: bool = True


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 2
    float64: bool = False
    threads: int = 1
    eval_every: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ahsw: AHSWConfig = field(default_factory=AHSWConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # -- derived -----------------------------------------------------------
    @property
    def n_layers(self) -> int:
        if self.model.n_layers is not None:
            return self.model.n_layers
        return 2 if self.model.scale == "small" else 3

    @property
    def k_percent(self) -> float:
        return 100.0 if self.model.scale == "dense" else self.model.k_percent

    @property
    def grid(self) -> VoxelGridSpec:
        g = self.scene.grid
        return VoxelGridSpec(tuple(g.dims), g.voxel_size, tuple(g.origin))

    @property
    def coarse_grid(self) -> VoxelGridSpec:
        return self.grid.coarsen(self.model.upsample_ratio)

    def rig(self):
        return make_rig(self.scene.n_cameras, tuple(self.scene.image_size), self.scene.hfov_deg)

    def scene_spec(self, seed: int) -> SceneSpec:
        s = self.scene
        return SceneSpec(
            seed=seed,
            n_objects=s.n_objects,
            class_frequencies=tuple(s.class_frequencies),
            sequence_length=s.sequence_length,
            rig=tuple(self.rig()),
            grid=self.grid,
            lidar_rays=s.lidar_rays,
            sweeps_per_frame=s.sweeps_per_frame,
            lidar_beams=s.lidar_beams,
            ego_speed=s.ego_speed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        m, s = self.model, self.scene
        checks = [
            (m.scale in ("small", "base", "dense"), f"model.scale must be small|base|dense, got {m.scale!r}"),
            (0 <= m.k_percent <= 100, "model.k_percent must be in [0, 100]"),
            (1 <= m.tau <= m.theta, "model.tau/theta must satisfy 1 <= tau <= theta"),
            (m.d_model % m.da_heads == 0 and m.d_model % m.ssca_heads == 0
             and m.d_model % m.temporal_heads == 0, "model.d_model must be divisible by every head count"),
            (set(m.shallow_levels) <= {1, 2, 3} and len(m.shallow_levels) > 0,
             "model.shallow_levels must be a non-empty subset of {1, 2, 3}"),
            (m.temporal_frames >= 0, "model.temporal_frames must be >= 0"),
            (s.sequence_length >= 1, "scene.sequence_length must be >= 1"),
            (self.loss.alpha > 0 and self.loss.beta > 0, "loss.alpha and loss.beta must be positive"),
            (self.ahsw.amplification > 1, "ahsw.amplification must be > 1"),
            (0 < self.ahsw.decay < 1, "ahsw.decay must be in (0, 1)"),
            (0 < self.ahsw.sample_percent <= 100, "ahsw.sample_percent must be in (0, 100]"),
            (self.train.epochs >= 1 and self.train.batch_size >= 1, "train.epochs and batch_size must be >= 1"),
            (self.data.n_train >= 1 and self.data.n_val >= 0, "data.n_train >= 1 and data.n_val >= 0"),
            (math.isclose(sum(s.class_frequencies), 1.0, abs_tol=1e-6), "scene.class_frequencies must sum to 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.coarse_grid
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key: {path + '.' if path else ''}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def with_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides, e.g. ``{"ablation.proxy_loss": False}``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return config_from_dict(data)
