"""The full network: encoders, fusion layers, temporal fusion, decoder and proxies.

One training sample is one sequence: the last frame is predicted, the
preceding frames (up to ``temporal_frames`` of them) feed temporal fusion.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import losses as L
from .backbones import ImageEncoder, LidarEncoder, PooledVoxels, encode_images, pool_points
from .config import RunConfig
from .fusion import FrameContext, FusionLayer, FusionStats, PointKeyIndex, ProjectionTable, build_point_keys
from .geometry import VoxelGridSpec
from .synthdata import N_CLASSES, SequenceData
from .temporal import TemporalFusion, UpsampleDecoder, align_history

N_CATEGORIES = N_CLASSES + 1


def downsample_labels(labels: np.ndarray, ratio: int) -> np.ndarray:
    """Coarse labels: the most frequent non-empty label of each ratio^3 block
    (lowest label on ties), empty if the block is all empty."""
    H, W, Z = labels.shape
    blocks = labels.reshape(H // ratio, ratio, W // ratio, ratio, Z // ratio, ratio)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(-1, ratio ** 3).astype(np.int64)
    counts = np.zeros((len(blocks), N_CATEGORIES), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(blocks)), ratio ** 3), blocks.ravel()), 1)
    counts[:, 0] = 0
    out = counts.argmax(axis=1)
    out[counts.max(axis=1) == 0] = 0
    return out.reshape(H // ratio, W // ratio, Z // ratio)


@dataclass
class FrameGeometry:
    pooled: PooledVoxels
    point_keys: PointKeyIndex


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (V_fine, C)
    layer_logits: list[torch.Tensor]  # head logits of the current frame, coarse
    stats: list[FusionStats]  # per fusion layer, current frame
    fusion_seconds: float = 0.0
    history_used: int = 0


class OccLoffModel(nn.Module):
    def __init__(self, cfg: RunConfig, rig):
        super().__init__()
        m = cfg.model
        self.cfg = cfg
        self.rig = list(rig)
        self.grid: VoxelGridSpec = cfg.grid
        self.coarse: VoxelGridSpec = cfg.coarse_grid
        D = m.d_model
        self.image_encoder = ImageEncoder(D)
        self.lidar_encoder = LidarEncoder(D)
        self.layers = nn.ModuleList(
            FusionLayer(D, N_CATEGORIES, m.da_heads, m.da_points, m.ssca_heads) for _ in range(cfg.n_layers)
        )
        self.temporal = TemporalFusion(D, m.temporal_heads)
        self.decoder = UpsampleDecoder(D, N_CATEGORIES, m.upsample_ratio)
        self.proxies = L.ProxyBank(N_CATEGORIES, cfg.loss.alpha, cfg.loss.beta, cfg.loss.proxy_init_std)
        self.table = ProjectionTable.build(self.coarse, self.rig)

    def frame_geometry(self, key, points: np.ndarray) -> FrameGeometry:
        """Point pooling and preprocessed key locations; deterministic per ``key``."""
        m = self.cfg.model
        seed = int(np.random.SeedSequence([self.cfg.seed, *_key_ints(key)]).generate_state(1)[0])
        return FrameGeometry(
            pool_points(points, self.coarse),
            build_point_keys(points, self.coarse, self.rig, m.tau, m.theta, seed),
        )

    # -- forward -------------------------------------------------------------
    def encode_frame(self, images: np.ndarray, geom: FrameGeometry, k_percent: float | None = None):
        """Coarse fused volume F_3d of one frame plus per-layer head logits and stats."""
        ab = self.cfg.ablation
        pyramid = encode_images(images, self.image_encoder)
        features = self.lidar_encoder(geom.pooled).features
        ctx = FrameContext(
            grid=self.coarse, pyramid=pyramid, table=self.table, point_keys=geom.point_keys,
            shallow_levels=tuple(self.cfg.model.shallow_levels),
            k_percent=self.cfg.k_percent if k_percent is None else k_percent,
            use_gsca=ab.gsca, use_ssca=ab.ssca,
        )
        logits = []
        t0 = time.perf_counter()
        for layer in self.layers:
            features, lg = layer(features, ctx)
            logits.extend(lg)
        return features, logits, ctx.stats, time.perf_counter() - t0

    def forward_sequence(self, seq: SequenceData, frame: int | None = None, key=None) -> ForwardOutput:
        t = len(seq.poses) - 1 if frame is None else frame
        key = seq.name if key is None else key
        k = self.cfg.model.temporal_frames if self.cfg.ablation.temporal else 0
        frames = list(range(max(0, t - k), t + 1))
        volumes = []
        for f in frames[:-1]:
            geom = self.frame_geometry((key, f), seq.points[f])
            volumes.append(self.encode_frame(seq.images[f], geom)[0])
        geom = self.frame_geometry((key, t), seq.points[t])
        current, layer_logits, stats, secs = self.encode_frame(seq.images[t], geom)
        volumes.append(current)
        if self.cfg.ablation.temporal:
            poses = [seq.poses[f] for f in frames]
            past = align_history(volumes, poses, self.coarse)
            fused = self.temporal(current, past)
        else:
            fused = current
        _, logits = self.decoder(fused, self.coarse.dims)
        return ForwardOutput(logits, layer_logits, stats, secs, len(frames) - 1)

    # -- losses --------------------------------------------------------------
    def loss_terms(self, out: ForwardOutput, labels: np.ndarray, rng: np.random.Generator | None = None,
                   exact_proxy: bool = False) -> dict[str, torch.Tensor]:
        """Per-term losses; ``rng`` drives proxy-loss voxel subsampling unless ``exact_proxy``."""
        lab = torch.as_tensor(np.asarray(labels).ravel().astype(np.int64))
        logits = out.logits
        probs = torch.softmax(logits, dim=-1)
        terms = {}
        if self.cfg.ablation.proxy_loss:
            cap = self.cfg.loss.proxy_max_voxels
            if exact_proxy or rng is None or len(lab) <= cap:
                idx = slice(None)
            else:
                idx = torch.as_tensor(L.stratified_subsample(lab.numpy(), cap, rng))
            terms["proxy"] = L.proxy_loss(logits[idx], lab[idx], self.proxies)
        terms["ce"] = L.ce_loss(logits, lab)
        terms["lovasz"] = L.lovasz_loss(probs, lab)
        terms["scal_geo"] = L.scal_geo(probs, lab)
        terms["scal_sem"] = L.scal_sem(probs, lab)
        if out.layer_logits and self.cfg.loss.aux_weight > 0:
            coarse = torch.as_tensor(
                downsample_labels(np.asarray(labels), self.cfg.model.upsample_ratio).ravel()
            )
            aux = sum(L.ce_loss(lg, coarse) for lg in out.layer_logits) / len(out.layer_logits)
            terms["aux"] = self.cfg.loss.aux_weight * aux
        return terms


def _key_ints(key) -> list[int]:
    if isinstance(key, tuple):
        return [v for part in key for v in _key_ints(part)]
    if isinstance(key, (int, np.integer)):
        return [int(key)]
    return list(str(key).encode())
