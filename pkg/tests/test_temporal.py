import numpy as np
import pytest
import torch

from occloff.geometry import VoxelGridSpec, pose_from_xyz_yaw
from occloff.temporal import (
    TemporalFusion, UpsampleDecoder, align_history, temporal_fuse, trilinear_weights_1d, upsample,
)

GRID = VoxelGridSpec((6, 5, 4), 1.0, (-3.0, -2.5, -2.0))
D = 8


@pytest.fixture
def fusion():
    torch.manual_seed(0)
    return TemporalFusion(D, 2).double()


def test_single_frame_is_value_projection(fusion):
    cur = torch.randn(GRID.n_voxels, D, dtype=torch.float64)
    out = temporal_fuse([cur], [pose_from_xyz_yaw(0, 0, 0, 0, 0)], GRID, fusion)
    assert torch.allclose(out, fusion.value_proj(cur), rtol=0, atol=1e-15)


@pytest.mark.parametrize("k", [1, 3])
def test_identical_static_frames_match_single_frame(fusion, k):
    cur = torch.randn(GRID.n_voxels, D, dtype=torch.float64)
    poses = [pose_from_xyz_yaw(i, 1.0, 2.0, 0.0, 0.3) for i in range(k + 1)]
    ref = temporal_fuse([cur], poses[-1:], GRID, fusion)
    out = temporal_fuse([cur] * (k + 1), poses, GRID, fusion)
    # 2 and 4 equal weights are powers of two, so the average is exact
    assert torch.equal(out, ref)


def test_frame_weights_sum_to_one(fusion):
    vols = [torch.randn(GRID.n_voxels, D, dtype=torch.float64) for _ in range(3)]
    poses = [pose_from_xyz_yaw(i, 0.3 * i, 0, 0, 0.1 * i) for i in range(3)]
    temporal_fuse(vols, poses, GRID, fusion)
    assert torch.allclose(fusion.last_weights.sum(dim=1), torch.ones(GRID.n_voxels, 2, dtype=torch.float64))


def test_one_voxel_ego_translation_gives_shifted_stacks():
    vol = torch.randn(GRID.n_voxels, D, dtype=torch.float64)
    # static scene; ego moves +1 voxel in x, so the old volume shifts by -1 along x
    poses = [pose_from_xyz_yaw(0, 0, 0, 0, 0), pose_from_xyz_yaw(1, 1.0, 0, 0, 0)]
    (aligned,) = align_history([vol, vol], poses, GRID)
    a = aligned.reshape(*GRID.dims, D)
    v = vol.reshape(*GRID.dims, D)
    assert torch.equal(a[:-1], v[1:])
    assert torch.count_nonzero(a[-1]) == 0


def test_decoder_shape_desk_scale():
    torch.manual_seed(0)
    dec = UpsampleDecoder(4, 9, 2)
    fine, logits = dec(torch.randn(32 * 32 * 8, 4), (32, 32, 8))
    assert fine.shape == (64 * 64 * 16, 4) and logits.shape == (64 * 64 * 16, 9)


def test_upsample_constant():
    vol = torch.full((3, 4, 5, 2), 2.5, dtype=torch.float64)
    out = upsample(vol, 2)
    assert out.shape == (3, 8, 10, 4)
    assert torch.all(out == 2.5)


def test_weights_1d_hand_values():
    np.testing.assert_allclose(trilinear_weights_1d(3, 2), [
        [1.0, 0.0, 0.0],
        [0.75, 0.25, 0.0],
        [0.25, 0.75, 0.0],
        [0.0, 0.75, 0.25],
        [0.0, 0.25, 0.75],
        [0.0, 0.0, 1.0],
    ])


@pytest.mark.parametrize("pos", [(0, 0, 0), (2, 1, 1), (3, 4, 2)])
def test_impulse_footprint(pos):
    dims = (4, 5, 3)
    vol = torch.zeros(1, *dims, dtype=torch.float64)
    vol[(0, *pos)] = 1.0
    out = upsample(vol, 2)[0].numpy()
    wx, wy, wz = (trilinear_weights_1d(n, 2)[:, p] for n, p in zip(dims, pos))
    np.testing.assert_allclose(out, np.einsum("i,j,k->ijk", wx, wy, wz), atol=1e-15)
