"""Voxel grids over point coordinates and sparse 3-D convolution blocks.

Voxel keys are integer triples.  For lookups each triple is packed into one
int64 (21 bits per axis after an offset of 2**20), which preserves
lexicographic order; grids keep their keys sorted, so neighbour search is a
binary search and every forward pass visits voxels in the same order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError, EmptyInputError, MappingError

_OFF = 1 << 20
_MASK = (1 << 21) - 1

# Tap order of the 3x3x3 kernel; the weight tensor's first three axes follow it.
OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64) + _OFF
    if k.size and (k.min() < 0 or k.max() > _MASK):
        raise ValueError("voxel index outside the packable range of +-2**20")
    return (k[..., 0] << 42) | (k[..., 1] << 21) | k[..., 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    p = np.asarray(packed, dtype=np.int64)
    return np.stack([(p >> 42) & _MASK, (p >> 21) & _MASK, p & _MASK], axis=-1) - _OFF


def lookup(sorted_packed: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row of each packed query key in ``sorted_packed``, or -1 if absent."""
    pos = np.searchsorted(sorted_packed, query)
    pos = np.minimum(pos, len(sorted_packed) - 1)
    return np.where(sorted_packed[pos] == query, pos, -1)


@dataclass
class SparseVoxelGrid:
    voxel_size: float
    keys: np.ndarray                 # (V, 3) int64, lexicographically sorted
    features: ad.DiffTensor          # (V, c)
    rep_points: np.ndarray           # (V, 3) member centroids, metres
    counts: np.ndarray               # (V,) member point counts
    point_to_voxel: np.ndarray       # (n,) row of each source point
    stride: int = 1

    def __post_init__(self):
        if self.features.shape[0] != self.keys.shape[0]:
            raise DimensionError(f"{self.features.shape[0]} feature rows for {self.keys.shape[0]} voxels")

    @property
    def packed(self) -> np.ndarray:
        return pack_keys(self.keys)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.keys.shape[0]

    def with_features(self, features: ad.DiffTensor) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.voxel_size, self.keys, features, self.rep_points,
                               self.counts, self.point_to_voxel, self.stride)


def voxelize(xyz, voxel_size: float, reflectance=None) -> SparseVoxelGrid:
    """Bucket points into cubes of side ``voxel_size``.

    The initial feature of a voxel is the mean offset of its members from the
    voxel centre, in voxel units (so within [-0.5, 0.5]).  Passing
    ``reflectance`` appends the member-mean reflectance as a fourth channel;
    that is only used by the unified-input baseline.
    """
    if voxel_size <= 0:
        raise ConfigurationError("voxel_size must be positive")
    xyz = np.asarray(getattr(xyz, "xyz", xyz), dtype=np.float64)
    if xyz.shape[0] == 0:
        raise EmptyInputError("cannot voxelize an empty cloud")
    keys = np.floor(xyz / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(pack_keys(keys), return_inverse=True)
    V = len(uniq)
    counts = np.bincount(inverse, minlength=V).astype(np.float64)
    cent = np.stack([np.bincount(inverse, weights=xyz[:, a], minlength=V) for a in range(3)], axis=1)
    cent /= counts[:, None]
    vkeys = unpack_keys(uniq)
    feats = np.clip(cent / voxel_size - vkeys - 0.5, -0.5, 0.5)
    if reflectance is not None:
        r = np.bincount(inverse, weights=np.asarray(reflectance, dtype=np.float64), minlength=V) / counts
        feats = np.column_stack([feats, r])
    return SparseVoxelGrid(voxel_size, vkeys, ad.tensor(feats), cent, counts,
                           inverse.astype(np.int64), 1)


def kernel_map(in_packed: np.ndarray, out_keys: np.ndarray, stride: int) -> np.ndarray:
    """``(V_out, 27)`` table of input rows feeding each output voxel per tap (-1: empty)."""
    query = (stride * out_keys)[:, None, :] + OFFSETS[None, :, :]
    return lookup(in_packed, pack_keys(query))


@dataclass
class SparseConvBlock:
    """3x3x3 sparse convolution, optional normalization and ReLU.

    Normalization uses running statistics only (no batch statistics in the
    forward pass); in training they follow an exponential moving average of
    the pre-normalization activations.
    """

    kernel: ad.DiffTensor            # (3, 3, 3, c_in, c_out)
    bias: ad.DiffTensor              # (c_out,)
    stride: int = 1
    relu: bool = True
    norm: bool = True
    gamma: ad.DiffTensor | None = None
    beta: ad.DiffTensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.kernel.ndim != 5 or self.kernel.shape[:3] != (3, 3, 3):
            raise ConfigurationError(f"kernel must be (3, 3, 3, c_in, c_out), got {self.kernel.shape}")
        if self.stride not in (1, 2):
            raise ConfigurationError("stride must be 1 or 2")
        c_out = self.c_out
        if self.norm:
            self.gamma = self.gamma if self.gamma is not None else ad.parameter(np.ones(c_out))
            self.beta = self.beta if self.beta is not None else ad.parameter(np.zeros(c_out))
            self.running_mean = np.zeros(c_out) if self.running_mean is None else self.running_mean
            self.running_var = np.ones(c_out) if self.running_var is None else self.running_var

    @property
    def c_in(self):
        return self.kernel.shape[3]

    @property
    def c_out(self):
        return self.kernel.shape[4]

    @classmethod
    def init(cls, c_in, c_out, stride, rng, relu=True, norm=True):
        scale = np.sqrt(2.0 / (27 * c_in))
        kernel = ad.parameter(rng.normal(0.0, scale, (3, 3, 3, c_in, c_out)))
        return cls(kernel, ad.parameter(np.zeros(c_out)), stride, relu, norm)

    def parameters(self, prefix=""):
        out = {f"{prefix}kernel": self.kernel, f"{prefix}bias": self.bias}
        if self.norm:
            out[f"{prefix}gamma"] = self.gamma
            out[f"{prefix}beta"] = self.beta
        return out

    def buffers(self, prefix=""):
        if not self.norm:
            return {}
        return {f"{prefix}running_mean": self.running_mean, f"{prefix}running_var": self.running_var}


def _downsample(grid: SparseVoxelGrid):
    coarse = np.floor_divide(grid.keys, 2)
    uniq, parent = np.unique(pack_keys(coarse), return_inverse=True)
    V = len(uniq)
    counts = np.bincount(parent, weights=grid.counts, minlength=V)
    rep = np.stack([np.bincount(parent, weights=grid.rep_points[:, a] * grid.counts, minlength=V)
                    for a in range(3)], axis=1) / counts[:, None]
    return unpack_keys(uniq), parent, counts, rep


def sparse_conv3d(grid: SparseVoxelGrid, block: SparseConvBlock, train=False) -> SparseVoxelGrid:
    """Stride 1 keeps the occupied set (submanifold); stride 2 maps keys to floor(key / 2).

    Each output sums kernel taps over occupied input neighbours only.
    """
    if grid.width != block.c_in:
        raise DimensionError(f"grid has {grid.width} channels, block expects {block.c_in}")
    if block.stride == 1:
        keys, counts, rep, p2v = grid.keys, grid.counts, grid.rep_points, grid.point_to_voxel
    else:
        keys, parent, counts, rep = _downsample(grid)
        p2v = parent[grid.point_to_voxel]
    nb = kernel_map(grid.packed, keys, block.stride)
    cols = ad.reshape(ad.gather_rows(grid.features, nb), (len(keys), 27 * block.c_in))
    out = ad.matmul(cols, ad.reshape(block.kernel, (27 * block.c_in, block.c_out))) + block.bias
    if block.norm:
        if train:
            m = block.momentum
            block.running_mean = (1 - m) * block.running_mean + m * out.data.mean(axis=0)
            block.running_var = (1 - m) * block.running_var + m * out.data.var(axis=0)
        inv = 1.0 / np.sqrt(block.running_var + block.eps)
        scale = block.gamma * inv
        out = out * scale + (block.beta - scale * block.running_mean)
    if block.relu:
        out = ad.relu(out)
    return SparseVoxelGrid(grid.voxel_size, keys, out, rep, counts, p2v,
                           grid.stride * block.stride)


def build_geo_encoder(channels=(3, 16, 16, 32, 32), strides=(1, 2, 1, 2), rng=None):
    """Blocks of the geometric encoder; defaults alternate stride 1 and 2."""
    if len(channels) != len(strides) + 1:
        raise ConfigurationError("channel chain must have one more entry than the stride list")
    rng = rng if rng is not None else np.random.default_rng(0)
    return [SparseConvBlock.init(ci, co, s, rng) for ci, co, s in zip(channels[:-1], channels[1:], strides)]


def geo_encoder_forward(grid: SparseVoxelGrid, blocks, train=False, return_levels=False):
    """Run the block stack; ``point_to_voxel`` is carried through every reduction."""
    for i in range(1, len(blocks)):
        if blocks[i].c_in != blocks[i - 1].c_out:
            raise ConfigurationError(f"block {i} expects {blocks[i].c_in} channels, "
                                     f"block {i - 1} produces {blocks[i - 1].c_out}")
    if blocks and blocks[0].c_in != grid.width:
        raise ConfigurationError(f"first block expects {blocks[0].c_in} channels, input has {grid.width}")
    levels = []
    for blk in blocks:
        grid = sparse_conv3d(grid, blk, train=train)
        levels.append(grid)
    return (grid, levels) if return_levels else grid


def devoxelize(grid: SparseVoxelGrid, n: int | None = None) -> ad.DiffTensor:
    """Per-point features gathered from each point's voxel row."""
    p2v = grid.point_to_voxel
    if n is not None and len(p2v) != n:
        raise MappingError(f"grid maps {len(p2v)} points, expected {n}")
    if len(p2v) and (p2v.min() < 0 or p2v.max() >= len(grid)):
        bad = int(np.flatnonzero((p2v < 0) | (p2v >= len(grid)))[0])
        raise MappingError(f"point {bad} has no voxel")
    return ad.gather_rows(grid.features, p2v)
