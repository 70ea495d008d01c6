"""
Micro-sized gradient checks, one per differentiable module plus the joint loss.

Each check returns the max relative error between tape gradients and
central differences.
"""

import numpy as np

from . import tensor as T
from .cafa import CafaParams, MixParams, cafa_forward, multihead_cafa_forward, nonlocal_fusion, point_projection_fusion
from .detect import Head2D, Head3D, head2d_forward, head3d_forward, loss2d, loss3d, Anchors3D
from .geometry import LIDAR_TO_CAMERA, Box2D, Box3D, pinhole
from .image import FeatureMap, ImageBackbone, ReduceDim
from .model import RunConfig, build_model
from .points import BevBackbone, VoxelEmbed, VoxelGridSpec, voxelize
from .scene import SceneConfig, generate_scene
from .scfi import ScfiHeads, roi_align_2d, roi_pool_3d, scfi_loss
from .tensor import Tensor, grad_check


def _rng(tag):
    return np.random.default_rng(np.random.SeedSequence([20_24, tag]))


def check_tensor():
    rng = _rng(1)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    img = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    feats = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    c1, c2, c3 = (rng.standard_normal(s) for s in ((3, 5), (3, 3, 3), (4, 3)))
    us, vs = rng.uniform(0, 4, 5), rng.uniform(0, 4, 5)
    index = np.array([0, 1, 1, 3, 0, 2])

    def f():
        a = T.sum_(T.softmax(T.matmul(x, w), axis=1) * c1) + T.sum_(T.log_softmax(T.matmul(x, w), axis=1) * c1)
        b = T.sum_(T.conv2d(img, k, stride=2, pad=1) * c2)
        c = T.sum_(T.bilinear_sample_many(img, us, vs))
        d = T.sum_(T.scatter_max(feats, index, 4) * c3)
        e = T.sum_(T.sigmoid(x) * T.softplus(x)) + T.sum_(T.smooth_l1(x, 0.5)) + T.sum_(T.l2_normalize(x))
        return a + b + c + d + e

    return grad_check(f, [x, w, img, k, feats])


def check_point_branch():
    rng = _rng(2)
    spec = VoxelGridSpec((0, 0, 0), (4, 3, 2), (1, 1, 1))
    pts = np.column_stack([rng.uniform(0, 4, 15), rng.uniform(0, 3, 15), rng.uniform(0, 2, 15), rng.random(15)])
    vs = voxelize(pts, spec)
    emb, bev = VoxelEmbed(spec, rng, d=4), BevBackbone(4, 3, rng)
    wts = rng.standard_normal((3, 4, 3))
    return grad_check(lambda: T.sum_(bev(emb(vs), spec) * wts), emb.parameters() + bev.parameters())


def check_image_branch():
    rng = _rng(3)
    bb = ImageBackbone(rng, stride=4, channels=(2, 3, 3, 3))
    for p in bb.parameters():
        if p.ndim == 1:
            p.data[...] = rng.uniform(0.05, 0.2, p.shape)
    red = ReduceDim(3, 2, rng)
    img = rng.random((3, 8, 8))
    wts = rng.standard_normal((2, 2, 2))
    return grad_check(lambda: T.sum_(red(bb(img)["c5"]).feats * wts), bb.parameters() + red.parameters())


def check_cafa():
    rng = _rng(4)
    p = CafaParams(4, rng, d_k=4, d_v=4, heads=2)
    mix = MixParams(4, rng)
    P = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    F = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    fmap = FeatureMap(Tensor(rng.standard_normal((4, 3, 4)), requires_grad=True), 4)
    centers = np.column_stack([rng.uniform(2, 6, 3), rng.uniform(-1, 1, 3), rng.uniform(-0.5, 0.5, 3)])
    proj = pinhole(4.0, 8.0, 6.0, rotation=LIDAR_TO_CAMERA)
    w = rng.standard_normal((3, 4))

    def f():
        out = T.sum_(cafa_forward(P, F, p)[0] * w)
        out = out + T.sum_(multihead_cafa_forward(P, F, p, heads=2)[0] * w)
        out = out + T.sum_(nonlocal_fusion(P, F, p) * w)
        return out + T.sum_(point_projection_fusion(P, fmap, centers, proj, (12, 16), mix) * w)

    return grad_check(f, p.parameters() + mix.parameters() + [P, F, fmap.feats])


def check_roi_scfi():
    rng = _rng(5)
    spec = VoxelGridSpec((0, -4, -2), (8, 4, 2), (0.5, 0.5, 0.5))
    pts = np.column_stack([rng.uniform(0, 8, 80), rng.uniform(-4, 4, 80), rng.uniform(-2, 2, 80), rng.random(80)])
    vs = voxelize(pts, spec)
    feats = Tensor(rng.standard_normal((len(vs), 3)), requires_grad=True)
    fmap = FeatureMap(Tensor(rng.standard_normal((2, 6, 8)), requires_grad=True), 4)
    heads = ScfiHeads(64 * 3, 16 * 2, rng, hidden=6, out=5)
    for name, p in heads.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.uniform(0.1, 0.5, p.shape)
    boxes = [(Box3D((4.0, 0.0, 0.0), (5.0, 5.0, 3.0)), Box2D(3.3, 2.1, 22.7, 17.9)),
             (Box3D((2.5, 1.0, -0.5), (3.0, 4.0, 2.0)), Box2D(1.0, 4.0, 12.0, 20.0))]

    def f():
        pairs = [(roi_pool_3d(vs, b3, feats=feats).flat, roi_align_2d(fmap, b2).flat) for b3, b2 in boxes]
        return sum((scfi_loss(pairs, heads, v) for v in ("ncs_pos", "infonce")), T.Tensor(0.0))

    return grad_check(f, [feats, fmap.feats] + heads.parameters())


def check_detect_heads():
    rng = _rng(6)
    spec = VoxelGridSpec((0, 0, -2), (4, 3, 2), (1, 1, 1))
    classes = SceneConfig().classes
    anchors = Anchors3D(spec, classes, -1.6)
    h3, h2 = Head3D(3, 2, rng), Head2D(2, 2, rng, anchor_size=8.0, top_k=4)
    bev = Tensor(rng.standard_normal((3, 4, 3)), requires_grad=True)
    fmap = FeatureMap(Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True), 8)
    boxes3 = [Box3D((1.6, 1.4, -0.8), (3.9, 1.8, 1.55), class_id=0), Box3D((3.4, 2.6, -0.8), (1.0, 1.0, 1.7), class_id=1)]
    gts2 = [Box2D(2.0, 3.0, 14.0, 17.0, class_id=0)]
    props = [Box2D(3.0, 2.0, 15.0, 16.0), Box2D(10.0, 4.0, 30.0, 20.0)]

    def f():
        a, b = loss3d(head3d_forward(bev, h3), boxes3, anchors)
        terms = loss2d(head2d_forward(fmap, h2, (24, 32), proposals=props), gts2, 2)
        return a + b + terms[0] + terms[1] + terms[2] + terms[3]

    return grad_check(f, h3.parameters() + h2.parameters() + [bev, fmap.feats])


def micro_setup(seed=0):
    """Tiny scene and fully-enabled model for end-to-end checks."""
    scene_cfg = SceneConfig(image_size=(32, 48), focal=24.0, lidar_range=((0, 8), (-4, 4), (-2, 2)),
                            object_count=(1, 2), clutter_count=(0, 1), ground_points=40, point_budget=300,
                            surface_density=6.0, spawn_x=(4.0, 7.0))
    cfg = RunConfig(fusion="cafa", scfi="ncs_pos", joint_2d=True, d=4, c_bev=3, image_channels=(2, 2, 2, 2),
                    stride=8, scfi_hidden=4, scfi_out=5, n_pairs=2, top_k=3, anchor_size_2d=8.0, seed=seed)
    model = build_model(cfg, scene_cfg)
    # zero biases put ReLU inputs of empty cells exactly on the kink
    rng = _rng(8)
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.uniform(0.05, 0.2, p.shape)
    scene = generate_scene(seed + 11, scene_cfg)
    return model, scene


def check_joint(max_entries=12):
    """Full joint loss on a micro scene; large tensors are subsampled."""
    model, scene = micro_setup()

    def f():
        return model.forward(scene, np.random.default_rng(0)).breakdown.total

    return grad_check(f, model.parameters(), max_entries=max_entries, rng=_rng(7))


CHECKS = {
    "tensor_autodiff": check_tensor,
    "point_branch": check_point_branch,
    "image_branch": check_image_branch,
    "cafa": check_cafa,
    "roi_scfi": check_roi_scfi,
    "detect_heads": check_detect_heads,
    "joint": check_joint,
}

# per-primitive and end-to-end tolerances
TOLERANCE = {name: 1e-6 for name in CHECKS}
TOLERANCE["joint"] = 1e-4
