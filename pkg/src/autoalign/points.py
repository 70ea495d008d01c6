"""
Point branch: voxelization, per-voxel embedding and a dense BEV backbone.

``embed_voxels`` output is the "before backbone" voxel feature set that the
fusion strategies consume; ``bev_backbone`` produces the "after backbone"
map fed to the 3D head.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .layers import MLP, Conv2d, Module

RAW_STATS = ("dx", "dy", "dz", "intensity", "count", "cx", "cy", "cz")


@dataclass(frozen=True)
class VoxelGridSpec:
    range_min: tuple = (0.0, -16.0, -2.0)
    range_max: tuple = (32.0, 16.0, 2.0)
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("range_min", "range_max", "voxel_size"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        lo, hi, vs = map(np.array, (self.range_min, self.range_max, self.voxel_size))
        if np.any(hi <= lo) or np.any(vs <= 0) or np.any(self.extents < 1):
            raise ValueError(f"invalid voxel grid {self}")

    @classmethod
    def from_range(cls, lidar_range, voxel_size=(1.0, 1.0, 1.0)):
        return cls(tuple(r[0] for r in lidar_range), tuple(r[1] for r in lidar_range), voxel_size)

    @property
    def extents(self):
        span = np.array(self.range_max) - np.array(self.range_min)
        return np.maximum(np.round(span / np.array(self.voxel_size)).astype(np.int64), 1)

    def centers(self, coords):
        return np.array(self.range_min) + (np.asarray(coords) + 0.5) * np.array(self.voxel_size)

    def cell_centers_bev(self):
        """[X, Y, 2] xy-centres of the BEV grid."""
        X, Y, _ = self.extents
        xs = self.range_min[0] + (np.arange(X) + 0.5) * self.voxel_size[0]
        ys = self.range_min[1] + (np.arange(Y) + 0.5) * self.voxel_size[1]
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)


@dataclass
class VoxelSet:
    coords: np.ndarray                 # [J, 3] int64, unique, sorted by linear index
    raw_stats: np.ndarray              # [J, 8] see RAW_STATS
    feats: object = field(default=None)  # Tensor [J, d] once embedded

    def __len__(self):
        return len(self.coords)

    @property
    def centers(self):
        return self.raw_stats[:, 5:8]

    def with_feats(self, feats):
        return replace(self, feats=feats)


def voxelize(points, spec):
    """Group points into the non-empty voxels of ``spec``.

    Out-of-range points are dropped; points on a max face go to the last voxel.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    lo, hi, vs = (np.array(a) for a in (spec.range_min, spec.range_max, spec.voxel_size))
    ext = spec.extents
    keep = np.all((pts[:, :3] >= lo) & (pts[:, :3] <= hi), axis=1)
    pts = pts[keep]
    if len(pts) == 0:
        return VoxelSet(np.zeros((0, 3), dtype=np.int64), np.zeros((0, 8)))
    idx = np.minimum(np.floor((pts[:, :3] - lo) / vs).astype(np.int64), ext - 1)
    linear = (idx[:, 0] * ext[1] + idx[:, 1]) * ext[2] + idx[:, 2]
    uniq, inverse, counts = np.unique(linear, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), 4))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    coords = np.stack([uniq // (ext[1] * ext[2]), (uniq // ext[2]) % ext[1], uniq % ext[2]], axis=1)
    centers = spec.centers(coords)
    stats = np.hstack([means[:, :3] - centers, means[:, 3:4], counts[:, None].astype(float), centers])
    return VoxelSet(coords, stats)


class VoxelEmbed(Module):
    """Per-voxel perceptron 8 -> d -> d over fixed-normalised raw stats."""

    def __init__(self, spec, rng, d=128):
        self.mlp = MLP([len(RAW_STATS), d, d], rng)
        lo, hi = np.array(spec.range_min), np.array(spec.range_max)
        self._shift = np.concatenate([np.zeros(5), (lo + hi) / 2])
        self._scale = np.concatenate([np.array(spec.voxel_size), [1.0, 1.0], (hi - lo) / 2])
        self.d = d

    def normalise(self, raw_stats):
        x = (raw_stats - self._shift) / self._scale
        x[:, 4] = np.log1p(raw_stats[:, 4])
        return x

    def __call__(self, vs):
        return vs.with_feats(self.mlp(self.normalise(vs.raw_stats)))


def embed_voxels(vs, params):
    return params(vs)


def scatter_bev(vs, spec, feats=None):
    """Dense [d, X, Y] grid, max-pooled over z; empty cells are zero."""
    feats = vs.feats if feats is None else feats
    X, Y, _ = spec.extents
    d = feats.shape[1]
    cell = vs.coords[:, 0] * Y + vs.coords[:, 1]
    dense = T.scatter_max(feats, cell, X * Y)
    return T.reshape(T.transpose(dense), (d, X, Y))


class BevBackbone(Module):
    """Two stride-1 3x3 conv + relu layers over the scattered BEV grid."""

    def __init__(self, d, c_bev, rng):
        self.conv1 = Conv2d(d, c_bev, 3, rng)
        self.conv2 = Conv2d(c_bev, c_bev, 3, rng)
        self.channels = c_bev

    def __call__(self, vs, spec):
        x = scatter_bev(vs, spec)
        return T.relu(self.conv2(T.relu(self.conv1(x))))


def bev_backbone(vs, spec, params):
    return params(vs, spec)
