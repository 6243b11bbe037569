"""Submanifold 3x3x3 convolution on flat voxel fields.

A field is a (V, C) tensor in C order over the grid dims. Convolutions are
evaluated only at a list of sites; each site reads its 27 neighbours from a
dense field, with out-of-grid neighbours read as zero (row ``V`` of the
padded field).
"""
import math

import numpy as np
import torch
from torch import nn

OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])


def neighbor_table(dims, sites: np.ndarray) -> np.ndarray:
    """(M, 27) flat neighbour indices of ``sites``; ``V`` marks out-of-grid."""
    dims = np.asarray(dims)
    V = int(np.prod(dims))
    sites = np.asarray(sites, dtype=np.int64)
    hwz = np.stack(np.unravel_index(sites, tuple(dims)), axis=1)
    nb = hwz[:, None, :] + OFFSETS[None]
    inside = np.all((nb >= 0) & (nb < dims), axis=2)
    flat = np.ravel_multi_index(tuple(np.clip(nb, 0, dims - 1).transpose(2, 0, 1)), tuple(dims))
    return np.where(inside, flat, V)


class SparseConv3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(27, c_in, c_out))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        bound = 1.0 / math.sqrt(27 * c_in)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, field: torch.Tensor, nbr) -> torch.Tensor:
        """Convolve ``field`` (V, C_in) at the sites described by ``nbr`` (M, 27)."""
        padded = torch.cat([field, field.new_zeros(1, field.shape[1])], dim=0)
        nbr = torch.as_tensor(nbr, device=field.device)
        gathered = padded[nbr].reshape(nbr.shape[0], -1)
        out = gathered @ self.weight.reshape(-1, self.weight.shape[2])
        if self.bias is not None:
            out = out + self.bias
        return out


def scatter_rows(n_rows: int, sites, values: torch.Tensor) -> torch.Tensor:
    """Dense (n_rows, C) field, zero except ``values`` at ``sites``."""
    out = values.new_zeros(n_rows, values.shape[1])
    return out.index_copy(0, torch.as_tensor(sites, device=values.device), values)
