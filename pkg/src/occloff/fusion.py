"""Sparse fusion encoder.

Per layer: an entropy mask picks the most uncertain coarse voxels, which
attend to the deep image features through deformable attention (geometric
branch); the volume is blended and normalised, a second mask is drawn and
the selected voxels attend to shallow-level features sampled at their own
LiDAR points (semantic branch). Voxels outside a mask are never written.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import kernels
from .backbones import ImageFeaturePyramid
from .geometry import CameraModel, VoxelGridSpec
from .sparse import SparseConv3d, neighbor_table

# ---------------------------------------------------------------------------
# Query proposal
# ---------------------------------------------------------------------------


def entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Natural-log entropy of softmax(logits) along the last axis, 0 log 0 = 0."""
    return torch.special.entr(torch.softmax(logits, dim=-1)).sum(dim=-1)


def coarse_entropy(features: torch.Tensor, head: nn.Module) -> torch.Tensor:
    with torch.no_grad():
        return entropy_from_logits(head(features))


def n_selected(k_percent: float, n_total: int) -> int:
    """ceil(K/100 * V) computed exactly for decimal K."""
    frac = Fraction(str(k_percent)) * n_total / 100
    return min(n_total, math.ceil(frac))


@dataclass
class EntropyMask:
    selected: np.ndarray  # ascending voxel indices
    entropies: np.ndarray

    def as_bool(self) -> np.ndarray:
        m = np.zeros(len(self.entropies), dtype=bool)
        m[self.selected] = True
        return m


def select_queries(entropies, k_percent: float) -> EntropyMask:
    """Top-K% entropies; ties go to the lower voxel index."""
    e = np.asarray(torch.as_tensor(entropies).detach().cpu(), dtype=np.float64).ravel()
    if not np.all(np.isfinite(e)):
        raise ValueError("entropy field must be finite")
    n = n_selected(k_percent, len(e))
    order = np.lexsort((np.arange(len(e)), -e))
    return EntropyMask(np.sort(order[:n]), e)


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------


def bilinear_sample(maps: torch.Tensor, batch: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample ``maps`` (B, C, Y, X) at pixel coordinates (pixel centers on integers).

    Coordinates are clamped to the border. Returns (P, C).
    """
    B, C, Y, X = maps.shape
    px = px.clamp(0, X - 1)
    py = py.clamp(0, Y - 1)
    x0 = px.detach().floor().clamp(max=X - 1)
    y0 = py.detach().floor().clamp(max=Y - 1)
    wx = px - x0
    wy = py - y0
    x0, y0 = x0.long(), y0.long()
    x1 = (x0 + 1).clamp(max=X - 1)
    y1 = (y0 + 1).clamp(max=Y - 1)
    flat = maps.permute(0, 2, 3, 1).reshape(B * Y * X, C)
    base = batch * (Y * X)

    def tap(yy, xx):
        return flat[base + yy * X + xx]

    w00 = ((1 - wx) * (1 - wy))[:, None]
    w01 = (wx * (1 - wy))[:, None]
    w10 = ((1 - wx) * wy)[:, None]
    w11 = (wx * wy)[:, None]
    return w00 * tap(y0, x0) + w01 * tap(y0, x1) + w10 * tap(y1, x0) + w11 * tap(y1, x1)


def normalized_to_pixels(p: torch.Tensor, width: int, height: int):
    """Normalised image coordinates in [0, 1] -> map pixel coordinates."""
    return p[..., 0] * width - 0.5, p[..., 1] * height - 0.5


def segment_softmax(scores: torch.Tensor, segments: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of ``scores`` (P, H) within groups given by ``segments`` (P,)."""
    idx = segments[:, None].expand_as(scores)
    smax = scores.new_full((n_segments, scores.shape[1]), -math.inf)
    smax = smax.scatter_reduce(0, idx, scores.detach(), reduce="amax", include_self=True)
    e = torch.exp(scores - smax[segments])
    denom = scores.new_zeros(n_segments, scores.shape[1]).index_add(0, segments, e)
    return e / denom[segments]


# ---------------------------------------------------------------------------
# Deformable attention and the geometric branch
# ---------------------------------------------------------------------------


class DeformableAttention(nn.Module):
    """Single-level deformable attention.

    Per head ``m`` the query predicts ``n_points`` offsets and logits; the
    logits are softmax-normalised over the points and weight bilinear
    samples of the head's value projection. Offsets are in map pixels.
    """

    def __init__(self, d_model: int, n_heads: int = 4, n_points: int = 8):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model, self.n_heads, self.n_points = d_model, n_heads, n_points
        self.value_proj = nn.Linear(d_model, d_model, bias=False)
        self.output_proj = nn.Linear(d_model, d_model, bias=False)
        self.offsets = nn.Linear(d_model, n_heads * n_points * 2)
        self.weights = nn.Linear(d_model, n_heads * n_points)
        self.last_weights: torch.Tensor | None = None
        self._reset()

    def _reset(self):
        nn.init.zeros_(self.offsets.weight)
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)
        theta = torch.arange(self.n_heads, dtype=torch.float32) * (2 * math.pi / self.n_heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid[:, None, :].repeat(1, self.n_points, 1)
        grid = grid * torch.arange(1, self.n_points + 1, dtype=torch.float32)[None, :, None] * 0.5
        with torch.no_grad():
            self.offsets.bias.copy_(grid.reshape(-1))

    def project_values(self, maps: torch.Tensor) -> torch.Tensor:
        """(views, D, Y, X) -> (views * heads, D / heads, Y, X)."""
        N, D, Y, X = maps.shape
        v = torch.einsum("od,ndyx->noyx", self.value_proj.weight, maps)
        return v.reshape(N * self.n_heads, D // self.n_heads, Y, X)

    def forward(self, query: torch.Tensor, ref: torch.Tensor, maps: torch.Tensor,
                view: torch.Tensor, values: torch.Tensor | None = None) -> torch.Tensor:
        """``query`` (P, D), ``ref`` (P, 2) normalised, ``maps`` (views, D, Y, X), ``view`` (P,)."""
        P = query.shape[0]
        Hh, K = self.n_heads, self.n_points
        _, _, Y, X = maps.shape
        if values is None:
            values = self.project_values(maps)
        off = self.offsets(query).reshape(P, Hh, K, 2)
        attn = torch.softmax(self.weights(query).reshape(P, Hh, K), dim=-1)
        self.last_weights = attn
        px, py = normalized_to_pixels(ref, X, Y)
        sx = px[:, None, None] + off[..., 0]
        sy = py[:, None, None] + off[..., 1]
        batch = (view[:, None, None] * Hh + torch.arange(Hh)[None, :, None]).expand(P, Hh, K)
        samples = bilinear_sample(values, batch.reshape(-1), sx.reshape(-1), sy.reshape(-1))
        samples = samples.reshape(P, Hh, K, -1)
        heads = (attn[..., None] * samples).sum(dim=2)
        return self.output_proj(heads.reshape(P, -1))


@dataclass
class ProjectionTable:
    """Projection of every coarse voxel center into every view (static per rig/grid)."""

    hits: np.ndarray  # (V, views) bool
    uv: np.ndarray  # (V, views, 2) normalised image coordinates

    @classmethod
    def build(cls, grid: VoxelGridSpec, rig: Sequence[CameraModel]) -> "ProjectionTable":
        centers = grid.centers()
        hits = np.zeros((len(centers), len(rig)), dtype=bool)
        uv = np.zeros((len(centers), len(rig), 2))
        for i, cam in enumerate(rig):
            pix, _, vis = cam.project_points(centers)
            hits[:, i] = vis
            uv[:, i] = pix / np.array([cam.width, cam.height])
        return cls(hits, uv)


def gsca(features: torch.Tensor, mask: EntropyMask, top: torch.Tensor, table: ProjectionTable,
         da: DeformableAttention) -> torch.Tensor:
    """Geometric-branch residual (V, D): mean DA output over hit views at masked voxels.

    Masked voxels seen by no camera and all unmasked voxels get zero.
    """
    sel = mask.selected
    hits = table.hits[sel]
    q_local, view = np.nonzero(hits)
    residual = torch.zeros_like(features)
    if len(q_local) == 0:
        return residual
    vox = torch.as_tensor(sel[q_local])
    ref = torch.as_tensor(table.uv[sel[q_local], view], dtype=features.dtype)
    out = da(features[vox], ref, top, torch.as_tensor(view))
    n_hit = torch.as_tensor(hits.sum(axis=1)[q_local], dtype=features.dtype)
    return residual.index_add(0, vox, out / n_hit[:, None])


# ---------------------------------------------------------------------------
# Point preprocessing and the semantic branch
# ---------------------------------------------------------------------------


def fps_seed(points: np.ndarray, center: np.ndarray) -> int:
    d = ((points - center) ** 2).sum(axis=1)
    return int(np.argmin(d))


def preprocess_points(points, tau: int, theta: int, bounds, rng: np.random.Generator) -> np.ndarray:
    """Bring one voxel's point list to a size in [tau, theta].

    More than ``theta`` points: farthest point sampling seeded at the point
    nearest the voxel center. Fewer than ``tau``: append uniform points drawn
    inside ``bounds = (lo, hi)``. Otherwise unchanged.
    """
    if not 1 <= tau <= theta:
        raise ValueError("need 1 <= tau <= theta")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    n = len(pts)
    if n > theta:
        seed = fps_seed(pts, (lo + hi) / 2)
        keep = kernels.fps_groups(pts, np.array([0, n]), np.array([seed]), np.array([theta]))
        return pts[keep]
    if n < tau:
        extra = lo + rng.random((tau - n, 3)) * (hi - lo)
        return np.concatenate([pts, extra])
    return pts


@dataclass
class PointKeyIndex:
    """Preprocessed points of every coarse voxel and their projections.

    ``pair_*`` arrays list each (point, hit view) combination.
    """

    points: np.ndarray  # (P, 3)
    owner: np.ndarray  # (P,) coarse voxel of each point
    local: np.ndarray  # (P,) index j of the point within its voxel
    pair_point: np.ndarray
    pair_view: np.ndarray
    pair_uv: np.ndarray  # (pairs, 2) normalised

    @property
    def pair_owner(self) -> np.ndarray:
        return self.owner[self.pair_point]


def preprocess_all(points: np.ndarray, grid: VoxelGridSpec, tau: int, theta: int,
                   rng: np.random.Generator):
    """:func:`preprocess_points` for every voxel of ``grid`` in ascending order.

    Equivalent to calling it voxel by voxel with one shared generator, with
    each voxel's points in lexicographic (x, y, z) order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    V = grid.n_voxels
    idx, inside = grid.point_to_index(points)
    pts, flat = points[inside], grid.flat_index(idx[inside])
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], flat))
    pts, flat = pts[order], flat[order]
    counts = np.bincount(flat, minlength=V)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    centers = grid.centers()

    big = np.nonzero(counts > theta)[0]
    seeds = np.empty(len(big), dtype=np.int64)
    for g, v in enumerate(big):
        seeds[g] = fps_seed(pts[offsets[v]:offsets[v + 1]], centers[v])
    big_offsets = np.concatenate([[0], np.cumsum(counts[big])])
    is_big = counts[flat] > theta
    big_pts = pts[is_big]
    picked = kernels.fps_groups(big_pts, big_offsets, seeds, np.full(len(big), theta))

    n_pad = np.maximum(tau - counts, 0)
    pad_owner = np.repeat(np.arange(V), n_pad)
    half = grid.voxel_size / 2
    pad = centers[pad_owner] - half + rng.random((int(n_pad.sum()), 3)) * grid.voxel_size

    parts_pts = [pts[~is_big], big_pts[picked], pad]
    parts_own = [flat[~is_big], np.repeat(big, theta), pad_owner]
    all_pts = np.concatenate(parts_pts)
    owner = np.concatenate(parts_own)
    # stable sort by owner keeps each voxel's original points first, then padding
    order = np.argsort(owner, kind="stable")
    all_pts, owner = all_pts[order], owner[order]
    start = np.searchsorted(owner, owner, side="left")
    local = np.arange(len(owner)) - start
    return all_pts, owner, local


def build_point_keys(points: np.ndarray, grid: VoxelGridSpec, rig: Sequence[CameraModel],
                     tau: int, theta: int, seed: int) -> PointKeyIndex:
    all_pts, owner, local = preprocess_all(points, grid, tau, theta, np.random.default_rng(seed))
    pair_point, pair_view, pair_uv = [], [], []
    for i, cam in enumerate(rig):
        pix, _, vis = cam.project_points(all_pts)
        nz = np.nonzero(vis)[0]
        pair_point.append(nz)
        pair_view.append(np.full(len(nz), i))
        pair_uv.append(pix[nz] / np.array([cam.width, cam.height]))
    pair_point = np.concatenate(pair_point)
    pair_view = np.concatenate(pair_view)
    pair_uv = np.concatenate(pair_uv)
    order = np.lexsort((pair_view, pair_point))
    return PointKeyIndex(all_pts, owner, local, pair_point[order], pair_view[order], pair_uv[order])


@dataclass
class KeySet:
    keys: torch.Tensor  # (n_keys, D)
    owner: torch.Tensor  # (n_keys,) row of the query each key belongs to
    view: np.ndarray  # i
    level: np.ndarray  # l
    point: np.ndarray  # j


def gather_keys(pair_owner_row: np.ndarray, pair_point: np.ndarray, pair_view: np.ndarray,
                pair_uv: np.ndarray, pyramid: ImageFeaturePyramid, levels: Sequence[int]) -> KeySet:
    """Bilinearly sample each shallow level at every (point, hit view) location."""
    keys, owners, views, lvls, pts = [], [], [], [], []
    dtype = pyramid.levels[0].dtype
    uv = torch.as_tensor(pair_uv, dtype=dtype)
    view_t = torch.as_tensor(pair_view, dtype=torch.long)
    for l in levels:
        maps = pyramid.level(l)
        px, py = normalized_to_pixels(uv, maps.shape[3], maps.shape[2])
        keys.append(bilinear_sample(maps, view_t, px, py))
        owners.append(pair_owner_row)
        views.append(pair_view)
        lvls.append(np.full(len(pair_view), l))
        pts.append(pair_point)
    return KeySet(
        torch.cat(keys) if keys else torch.zeros(0, pyramid.levels[0].shape[1], dtype=dtype),
        torch.as_tensor(np.concatenate(owners), dtype=torch.long),
        np.concatenate(views), np.concatenate(lvls), np.concatenate(pts),
    )


def gather_point_keys(points: np.ndarray, pyramid: ImageFeaturePyramid, levels: Sequence[int],
                      rig: Sequence[CameraModel]) -> KeySet:
    """Key set for one voxel's (already preprocessed) points."""
    pp, pv, puv = [], [], []
    for i, cam in enumerate(rig):
        pix, _, vis = cam.project_points(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        nz = np.nonzero(vis)[0]
        pp.append(nz)
        pv.append(np.full(len(nz), i))
        puv.append(pix[nz] / np.array([cam.width, cam.height]))
    pp, pv, puv = np.concatenate(pp), np.concatenate(pv), np.concatenate(puv).reshape(-1, 2)
    return gather_keys(np.zeros(len(pp), dtype=np.int64), pp, pv, puv, pyramid, levels)


class SemanticCrossAttention(nn.Module):
    """Multi-head scaled dot-product attention of one query over its key set."""

    def __init__(self, d_model: int, n_heads: int = 4):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model, self.n_heads = d_model, n_heads
        self.query_proj = nn.Linear(d_model, d_model, bias=False)
        self.key_proj = nn.Linear(d_model, d_model, bias=False)
        self.value_proj = nn.Linear(d_model, d_model, bias=False)  # per-head key projections
        self.output_proj = nn.Linear(d_model, d_model, bias=False)  # per-head output projections
        self.last_weights: torch.Tensor | None = None

    def attend(self, scores: torch.Tensor, values: torch.Tensor, owner: torch.Tensor, n_queries: int):
        """Combine per-head ``values`` (n_keys, H, d) with ``scores`` (n_keys, H)."""
        w = segment_softmax(scores, owner, n_queries)
        self.last_weights = w
        heads = values.new_zeros(n_queries, self.n_heads, values.shape[2])
        heads = heads.index_add(0, owner, w[..., None] * values)
        return self.output_proj(heads.reshape(n_queries, -1))

    def forward(self, queries: torch.Tensor, keys: torch.Tensor, owner: torch.Tensor) -> torch.Tensor:
        """``queries`` (Q, D); ``keys`` (n_keys, D) belonging to query ``owner``.

        Queries without keys get a zero output.
        """
        Q, D = queries.shape
        Hh, d = self.n_heads, D // self.n_heads
        if keys.shape[0] == 0:
            return queries.new_zeros(Q, D)
        q = self.query_proj(queries).reshape(Q, Hh, d)
        k = self.key_proj(keys).reshape(-1, Hh, d)
        v = self.value_proj(keys).reshape(-1, Hh, d)
        scores = (q[owner] * k).sum(-1) / math.sqrt(d)
        out = self.attend(scores, v, owner, Q)
        has_keys = torch.zeros(Q, dtype=torch.bool).index_fill(0, owner, True)
        return torch.where(has_keys[:, None], out, 0.0)


def ssca(query: torch.Tensor, keys: KeySet, attn: SemanticCrossAttention) -> torch.Tensor:
    """Single-voxel semantic branch output; zero for an empty key set."""
    if keys.keys.shape[0] == 0:
        return query.new_zeros(query.shape[-1])
    return attn(query.reshape(1, -1), keys.keys, torch.zeros(keys.keys.shape[0], dtype=torch.long))[0]


def ssca_residual(features: torch.Tensor, mask: EntropyMask, key_index: PointKeyIndex,
                  pyramid: ImageFeaturePyramid, levels: Sequence[int],
                  attn: SemanticCrossAttention) -> torch.Tensor:
    sel = mask.selected
    residual = torch.zeros_like(features)
    if len(sel) == 0:
        return residual
    row_of = np.full(features.shape[0], -1, dtype=np.int64)
    row_of[sel] = np.arange(len(sel))
    rows = row_of[key_index.pair_owner]
    use = rows >= 0
    keys = gather_keys(rows[use], key_index.pair_point[use], key_index.pair_view[use],
                       key_index.pair_uv[use], pyramid, levels)
    sel_t = torch.as_tensor(sel)
    out = attn(features[sel_t], keys.keys, keys.owner)
    return residual.index_copy(0, sel_t, out)


# ---------------------------------------------------------------------------
# Blending and the layer
# ---------------------------------------------------------------------------


class SparseBlend(nn.Module):
    """Submanifold conv of the residual at masked voxels, then add & LayerNorm there."""

    def __init__(self, d_model: int):
        super().__init__()
        self.conv = SparseConv3d(d_model, d_model)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, residual: torch.Tensor, features: torch.Tensor, mask: EntropyMask, dims) -> torch.Tensor:
        sel = mask.selected
        if len(sel) == 0:
            return features
        sel_t = torch.as_tensor(sel)
        blended = self.conv(residual, neighbor_table(dims, sel))
        updated = self.norm(features[sel_t] + blended)
        return features.index_copy(0, sel_t, updated)


def sparse_blend(residual, features, mask, dims, blend: SparseBlend):
    return blend(residual, features, mask, dims)


@dataclass
class FusionStats:
    gsca_calls: int = 0
    ssca_calls: int = 0
    gsca_conv_sites: int = 0
    ssca_conv_sites: int = 0
    masks: list[EntropyMask] = field(default_factory=list)


@dataclass
class FrameContext:
    """Everything a fusion layer needs about one frame besides the volume."""

    grid: VoxelGridSpec
    pyramid: ImageFeaturePyramid
    table: ProjectionTable
    point_keys: PointKeyIndex
    shallow_levels: Sequence[int] = (1, 2)
    k_percent: float = 35.0
    use_gsca: bool = True
    use_ssca: bool = True
    stats: list[FusionStats] = field(default_factory=list)


class FusionLayer(nn.Module):
    def __init__(self, d_model: int, n_classes: int, da_heads: int = 4, da_points: int = 8, ssca_heads: int = 4):
        super().__init__()
        self.head_g = nn.Linear(d_model, n_classes)
        self.head_s = nn.Linear(d_model, n_classes)
        self.da = DeformableAttention(d_model, da_heads, da_points)
        self.blend_g = SparseBlend(d_model)
        self.sca = SemanticCrossAttention(d_model, ssca_heads)
        self.blend_s = SparseBlend(d_model)

    def forward(self, features: torch.Tensor, ctx: FrameContext):
        """Returns updated features and the head logits used for the two proposals."""
        st = FusionStats()
        logits = []
        dims = ctx.grid.dims
        if ctx.use_gsca:
            lg = self.head_g(features)
            logits.append(lg)
            mask = select_queries(entropy_from_logits(lg.detach()), ctx.k_percent)
            res = gsca(features, mask, ctx.pyramid.top, ctx.table, self.da)
            features = self.blend_g(res, features, mask, dims)
            st.gsca_calls = st.gsca_conv_sites = len(mask.selected)
            st.masks.append(mask)
        if ctx.use_ssca:
            ls = self.head_s(features)
            logits.append(ls)
            mask = select_queries(entropy_from_logits(ls.detach()), ctx.k_percent)
            res = ssca_residual(features, mask, ctx.point_keys, ctx.pyramid, ctx.shallow_levels, self.sca)
            features = self.blend_s(res, features, mask, dims)
            st.ssca_calls = st.ssca_conv_sites = len(mask.selected)
            st.masks.append(mask)
        ctx.stats.append(st)
        return features, logits


def fusion_layer(features, ctx: FrameContext, layer: FusionLayer):
    return layer(features, ctx)
