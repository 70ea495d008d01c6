from collections import defaultdict

import numpy as np
import pytest

from autoalign import tensor as T
from autoalign.errors import DimensionError
from autoalign.image import (
    ImageBackbone, ReduceDim, flat_index_to_pixel, flatten_spatial, unflatten_spatial, FeatureMap,
)
from autoalign.points import BevBackbone, VoxelEmbed, VoxelGridSpec, scatter_bev, voxelize
from autoalign.tensor import Tensor, grad_check

SPEC = VoxelGridSpec((0, -4, -2), (8, 4, 2), (1, 1, 1))


def _small_spec():
    return VoxelGridSpec((0, 0, 0), (4, 3, 2), (1, 1, 1))


class TestVoxelize:
    def test_single_point_at_center(self):
        vs = voxelize([[0.5, -3.5, -1.5, 0.7]], SPEC)
        assert len(vs) == 1
        np.testing.assert_array_equal(vs.coords, [[0, 0, 0]])
        np.testing.assert_allclose(vs.raw_stats[0, :3], 0, atol=1e-15)
        assert vs.raw_stats[0, 4] == 1 and vs.raw_stats[0, 3] == pytest.approx(0.7)
        np.testing.assert_allclose(vs.centers[0], [0.5, -3.5, -1.5])

    def test_symmetric_pair(self):
        vs = voxelize([[2.4, 0.5, 0.5, 0.0], [2.6, 0.5, 0.5, 1.0]], SPEC)
        assert len(vs) == 1 and vs.raw_stats[0, 4] == 2
        np.testing.assert_allclose(vs.raw_stats[0, :3], 0, atol=1e-12)

    def test_max_boundary_goes_to_last_voxel(self):
        vs = voxelize([[8.0, 4.0, 2.0, 0.0]], SPEC)
        np.testing.assert_array_equal(vs.coords, [[7, 7, 3]])

    def test_out_of_range_dropped_and_empty(self):
        vs = voxelize([[9.0, 0, 0, 0], [-1, 0, 0, 0]], SPEC)
        assert len(vs) == 0 and vs.raw_stats.shape == (0, 8)

    def test_matches_dictionary_grouping(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-1, 9, 500), rng.uniform(-5, 5, 500),
                               rng.uniform(-2.5, 2.5, 500), rng.random(500)])
        groups = defaultdict(list)
        for p in pts:
            if not (0 <= p[0] <= 8 and -4 <= p[1] <= 4 and -2 <= p[2] <= 2):
                continue
            key = tuple(min(int(np.floor(p[a] - SPEC.range_min[a])), int(SPEC.extents[a]) - 1)
                        for a in range(3))
            groups[key].append(p)
        vs = voxelize(pts, SPEC)
        assert sorted(groups) == [tuple(c) for c in vs.coords]
        for c, stats in zip(vs.coords, vs.raw_stats):
            g = np.array(groups[tuple(c)])
            center = np.array(SPEC.range_min) + np.array(c) + 0.5
            assert stats[4] == len(g)
            np.testing.assert_allclose(stats[:3], g[:, :3].mean(0) - center, atol=1e-12)
            np.testing.assert_allclose(stats[3], g[:, 3].mean(), atol=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 5, (200, 4))
        a, b = voxelize(pts, SPEC), voxelize(pts[rng.permutation(200)], SPEC)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_allclose(a.raw_stats, b.raw_stats, atol=1e-12)
        assert len(a) <= min(200, int(np.prod(SPEC.extents)))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            VoxelGridSpec((0, 0, 0), (1, 1, 1), (0, 1, 1))


def _random_voxels(rng, n=30, spec=SPEC):
    pts = np.column_stack([rng.uniform(0, 8, n), rng.uniform(-4, 4, n), rng.uniform(-2, 2, n), rng.random(n)])
    return voxelize(pts, spec)


class TestEmbed:
    def test_zero_weights(self):
        rng = np.random.default_rng(2)
        emb = VoxelEmbed(SPEC, rng, d=16)
        for p in emb.parameters():
            p.data[...] = 0
        assert np.all(emb(_random_voxels(rng)).feats.data == 0)

    def test_row_equivariance(self):
        rng = np.random.default_rng(3)
        emb = VoxelEmbed(SPEC, rng, d=16)
        vs = _random_voxels(rng)
        perm = rng.permutation(len(vs))
        permuted = type(vs)(vs.coords[perm], vs.raw_stats[perm])
        np.testing.assert_allclose(emb(permuted).feats.data, emb(vs).feats.data[perm], atol=1e-14)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        emb = VoxelEmbed(SPEC, rng, d=6)
        vs = _random_voxels(rng, 10)
        w = rng.standard_normal((len(vs), 6))
        assert grad_check(lambda: T.sum_(emb(vs).feats * w), emb.parameters()) < 1e-6


class TestBev:
    def test_single_voxel_one_cell(self):
        vs = voxelize([[3.5, 0.5, 0.5, 1.0]], SPEC)
        grid = scatter_bev(vs, SPEC, Tensor(np.array([[1.0, -2.0, 3.0]]))).data
        nz = np.argwhere(np.any(grid != 0, axis=0))
        np.testing.assert_array_equal(nz, [[3, 4]])

    def test_column_max(self):
        vs = voxelize([[3.5, 0.5, 0.5, 1.0], [3.5, 0.5, -1.5, 1.0]], SPEC)
        feats = np.array([[1.0, -2.0, 3.0], [0.0, 5.0, -1.0]])
        grid = scatter_bev(vs, SPEC, Tensor(feats)).data
        np.testing.assert_array_equal(grid[:, 3, 4], [1.0, 5.0, 3.0])

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        spec = _small_spec()
        pts = np.column_stack([rng.uniform(0, 4, 12), rng.uniform(0, 3, 12), rng.uniform(0, 2, 12), rng.random(12)])
        vs = voxelize(pts, spec)
        emb = VoxelEmbed(spec, rng, d=4)
        bev = BevBackbone(4, 3, rng)
        w = rng.standard_normal((3, 4, 3))
        f = lambda: T.sum_(bev(emb(vs), spec) * w)  # noqa: E731
        assert grad_check(f, emb.parameters() + bev.parameters()) < 1e-6


class TestImage:
    def test_stride_arithmetic(self):
        rng = np.random.default_rng(6)
        bb = ImageBackbone(rng, stride=8, channels=(4, 4, 8, 8))
        out = bb(np.zeros((3, 128, 192)))
        assert out["c5"].feats.shape == (8, 16, 24) and out["p5"].feats.shape == (8, 16, 24)

    @pytest.mark.parametrize("stride", [4, 8, 16, 32])
    def test_ceil_formula(self, stride):
        bb = ImageBackbone(np.random.default_rng(0), stride=stride, channels=(2, 2, 2, 2))
        h, w = bb(np.zeros((3, 64, 96)))["c5"].hw
        assert (h, w) == (-(-64 // stride), -(-96 // stride))

    def test_indivisible(self):
        bb = ImageBackbone(np.random.default_rng(0), stride=8, channels=(2, 2, 2, 2))
        with pytest.raises(DimensionError):
            bb(np.zeros((3, 20, 16)))

    def test_zero_image_zero_bias(self):
        bb = ImageBackbone(np.random.default_rng(7), stride=8, channels=(4, 4, 4, 4))
        out = bb(np.zeros((3, 16, 16)))
        assert np.all(out["c5"].feats.data == 0) and np.all(out["p5"].feats.data == 0)

    def test_backbone_gradcheck(self):
        rng = np.random.default_rng(8)
        bb = ImageBackbone(rng, stride=4, channels=(2, 3, 3, 3))
        for p in bb.parameters():
            if p.ndim == 1:
                p.data[...] = rng.uniform(0.05, 0.2, p.shape)
        img = rng.random((3, 8, 8))
        w = rng.standard_normal((3, 2, 2))
        f = lambda: T.sum_(bb(img)["c5"].feats * w) + T.sum_(bb(img)["p5"].feats * w)  # noqa: E731
        assert grad_check(f, bb.parameters()) < 1e-6

    def test_reduce_dim_identity(self):
        rng = np.random.default_rng(9)
        red = ReduceDim(4, 4, rng)
        red.conv.weight.data[...] = np.eye(4).reshape(4, 4, 1, 1)
        z = FeatureMap(Tensor(rng.standard_normal((4, 3, 5))), 8)
        np.testing.assert_array_equal(red(z).feats.data, z.feats.data)
        assert red(z).stride == 8

    def test_reduce_dim_pixel_independence(self):
        rng = np.random.default_rng(10)
        red = ReduceDim(3, 5, rng)
        x = rng.standard_normal((3, 4, 4))
        y = x.copy()
        y[:, 2, 1] += 1.0
        diff = red(FeatureMap(Tensor(y), 8)).feats.data - red(FeatureMap(Tensor(x), 8)).feats.data
        changed = np.argwhere(np.any(diff != 0, axis=0))
        np.testing.assert_array_equal(changed, [[2, 1]])

    def test_reduce_dim_matches_pixel_loop(self):
        rng = np.random.default_rng(11)
        red = ReduceDim(3, 5, rng)
        red.conv.bias.data[...] = rng.standard_normal(5)
        x = rng.standard_normal((3, 4, 6))
        out = red(FeatureMap(Tensor(x), 8)).feats.data
        W, b = red.conv.weight.data[:, :, 0, 0], red.conv.bias.data
        for i in range(4):
            for j in range(6):
                np.testing.assert_allclose(out[:, i, j], W @ x[:, i, j] + b, atol=1e-12, rtol=0)

    def test_flatten_order_and_round_trip(self):
        f = FeatureMap(Tensor(np.arange(8.0).reshape(2, 2, 2)), 8)
        flat = flatten_spatial(f).data
        np.testing.assert_array_equal(flat, [[0, 4], [1, 5], [2, 6], [3, 7]])
        np.testing.assert_array_equal(unflatten_spatial(Tensor(flat), 2, 2).feats.data, f.feats.data)

    def test_flat_row_index(self):
        rng = np.random.default_rng(12)
        f = FeatureMap(Tensor(rng.standard_normal((3, 5, 7))), 8)
        flat = flatten_spatial(f).data
        for k in rng.integers(0, 35, 10):
            v, u = flat_index_to_pixel(k, 7)
            np.testing.assert_array_equal(flat[k], f.feats.data[:, v, u])
