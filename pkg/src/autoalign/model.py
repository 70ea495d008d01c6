"""
Run configuration and the assembled fusion detector.

Components are switched by flags; a disabled component's parameters are
never created, so the parameter set of a model is exactly what its config
enables.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .cafa import (
    CafaParams, MixParams, attention_mass_in_box, cafa_forward, multihead_cafa_forward, nonlocal_fusion,
    point_projection_fusion,
)
from .detect import (
    LOSS_TERMS, Anchors3D, Head2D, Head3D, LossBreakdown, decode3d, head2d_forward, head3d_forward,
    loss2d, loss3d,
)
from .errors import ConfigError
from .image import ImageBackbone, ReduceDim, flatten_spatial
from .layers import Module
from .points import BevBackbone, VoxelEmbed, VoxelGridSpec, voxelize
from .scene import SceneConfig
from .scfi import (
    IMAGE_SOURCES, POINT_SOURCES, ScfiHeads, bev_as_voxels, pair_features, pooled_dims, sample_pairs,
    scfi_loss,
)

FUSIONS = ("none", "point_proj", "nonlocal", "cafa", "cafa_multihead")
SCFI_MODES = ("off", "ncs_pos", "symmetric", "nce", "infonce", "ce_pos")
OPTIMIZERS = ("adamw", "sgd")
SCHEDULES = ("constant",)


@dataclass
class RunConfig:
    data: str = ""
    seed: int = 0
    steps: int = 1000
    batch_size: int = 1
    lr_3d: float = 1e-3
    lr_2d: float = 0.00125
    opt_3d: str = "adamw"
    opt_2d: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.01
    grad_clip: float = 35.0
    lr_schedule: str = "constant"
    fusion: str = "cafa"
    heads: int = 4
    cafa_dropout: float = 0.0
    cafa_layer_norm: bool = False
    scfi: str = "off"
    scfi_image_source: str = "C5"
    scfi_point_source: str = "before"
    n_pairs: int = 4
    scfi_score_thresh: float = 0.3
    scfi_pad_with_gt: bool = True
    scfi_hidden: int = 512
    scfi_out: int = 2048
    joint_2d: bool = False
    loss_weights: dict = field(default_factory=dict)
    d: int = 128
    c_bev: int = 64
    image_channels: tuple = (16, 32, 64, 64)
    stride: int = 8
    top_k: int = 16
    anchor_size_2d: float = 24.0
    eval_every: int = 0
    eval_split: str = "eval"
    score_thresh: float = 0.3
    nms_iou: float = 0.1
    iou_3d: tuple = (0.5, 0.25)
    iou_bev: tuple = (0.5, 0.25)

    def __post_init__(self):
        self.image_channels = tuple(int(c) for c in self.image_channels)
        self.iou_3d = tuple(float(x) for x in self.iou_3d)
        self.iou_bev = tuple(float(x) for x in self.iou_bev)
        self.validate()

    def validate(self):
        checks = [
            (self.lr_3d > 0 and self.lr_2d > 0, "learning rates must be positive"),
            (self.grad_clip >= 0, "grad_clip must be >= 0 (0 disables clipping)"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.n_pairs >= 1, "n_pairs must be >= 1"),
            (self.fusion in FUSIONS, f"fusion must be one of {FUSIONS}"),
            (self.scfi in SCFI_MODES, f"scfi must be one of {SCFI_MODES}"),
            (self.scfi_image_source in IMAGE_SOURCES, f"scfi_image_source must be one of {IMAGE_SOURCES}"),
            (self.scfi_point_source in POINT_SOURCES, f"scfi_point_source must be one of {POINT_SOURCES}"),
            (self.opt_3d in OPTIMIZERS and self.opt_2d in OPTIMIZERS, f"optimizers must be in {OPTIMIZERS}"),
            (self.lr_schedule in SCHEDULES, f"lr_schedule must be one of {SCHEDULES}"),
            (set(self.loss_weights) <= set(LOSS_TERMS), f"loss_weights keys must be in {LOSS_TERMS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def uses_image(self):
        return self.fusion != "none" or self.scfi != "off" or self.joint_2d

    @property
    def scfi_variant(self):
        return "symmetric_no_stopgrad" if self.scfi == "symmetric" else self.scfi

    def to_dict(self):
        d = asdict(self)
        d["image_channels"] = list(self.image_channels)
        d["iou_3d"], d["iou_bev"] = list(self.iou_3d), list(self.iou_bev)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


@dataclass
class Outputs:
    breakdown: LossBreakdown
    head3d: object = None
    align: object = None
    voxels: object = None
    fmap_hw: tuple = None


class Model(Module):
    def __init__(self, cfg, scene_cfg, rng):
        self.cfg, self.scene_cfg = cfg, scene_cfg
        self.spec = VoxelGridSpec.from_range(scene_cfg.lidar_range)
        self.anchors = Anchors3D(self.spec, scene_cfg.classes, scene_cfg.ground_z)
        n_cls = scene_cfg.num_classes
        d = cfg.d
        self.embed = VoxelEmbed(self.spec, rng, d)
        self.backbone = self.reduce = self.fusion = self.head2d = self.scfi = None
        if cfg.uses_image:
            self.backbone = ImageBackbone(rng, cfg.stride, cfg.image_channels)
        c = self.backbone.channels if self.backbone else 0
        if cfg.fusion != "none":
            self.reduce = ReduceDim(c, d, rng)
            if cfg.fusion == "point_proj":
                self.fusion = MixParams(d, rng)
            else:
                heads = cfg.heads if cfg.fusion == "cafa_multihead" else 1
                self.fusion = CafaParams(d, rng, d, d, heads, cfg.cafa_dropout, cfg.cafa_layer_norm)
        self.bev = BevBackbone(d, cfg.c_bev, rng)
        self.head3d = Head3D(cfg.c_bev, n_cls, rng)
        if cfg.joint_2d:
            self.head2d = Head2D(c, n_cls, rng, cfg.anchor_size_2d, cfg.top_k)
        if cfg.scfi != "off":
            d_point = d if cfg.scfi_point_source == "before" else cfg.c_bev
            in3, in2 = pooled_dims(d_point, c)
            self.scfi = ScfiHeads(in3, in2, rng, cfg.scfi_hidden, cfg.scfi_out)

    # -- parameter groups ---------------------------------------------------

    def point_parameters(self):
        groups = [self.embed, self.fusion, self.bev, self.head3d]
        params = [p for g in groups if g is not None for p in g.parameters()]
        return params + (self.scfi.point_side() if self.scfi else [])

    def image_parameters(self):
        groups = [self.backbone, self.reduce, self.head2d]
        params = [p for g in groups if g is not None for p in g.parameters()]
        return params + (self.scfi.image_side() if self.scfi else [])

    # -- forward ------------------------------------------------------------

    def _fuse(self, P, vs, c5, scene):
        cfg = self.cfg
        if cfg.fusion == "none":
            return P, None
        red = self.reduce(c5)
        if cfg.fusion == "point_proj":
            return point_projection_fusion(P, red, vs.centers, scene.projection, scene.image_size, self.fusion), None
        flat = flatten_spatial(red)
        if cfg.fusion == "nonlocal":
            return nonlocal_fusion(P, flat, self.fusion), None
        if cfg.fusion == "cafa_multihead":
            return multihead_cafa_forward(P, flat, self.fusion, cfg.heads)
        return cafa_forward(P, flat, self.fusion)

    def forward(self, scene, rng=None, train=True):
        """Losses (and intermediate outputs) for one scene."""
        cfg = self.cfg
        vs = voxelize(scene.points, self.spec)
        P = self.embed(vs).feats
        maps = self.backbone(scene.image) if self.backbone else None
        fused, align = self._fuse(P, vs, maps["c5"] if maps else None, scene)
        vs = vs.with_feats(fused)
        bev = self.bev(vs, self.spec)
        out3 = head3d_forward(bev, self.head3d)
        terms = {}
        terms["l3d_cls"], terms["l3d_reg"] = loss3d(out3, scene.gt_boxes3d, self.anchors)
        if self.head2d is not None:
            extra = scene.gt_boxes2d if train else ()
            out2 = head2d_forward(maps["p5"], self.head2d, scene.image_size, extra_proposals=extra)
            names = ("l2d_rpn_cls", "l2d_rpn_reg", "l2d_rcnn_cls", "l2d_rcnn_reg")
            terms.update(zip(names, loss2d(out2, scene.gt_boxes2d, self.scene_cfg.num_classes)))
        if self.scfi is not None:
            terms["l_scfi"] = self._scfi_term(scene, vs, bev, out3, maps, rng)
        bd = LossBreakdown(terms, dict(cfg.loss_weights))
        return Outputs(bd, out3, align, vs, maps["c5"].hw if maps else None)

    def _scfi_term(self, scene, vs, bev, out3, maps, rng):
        cfg = self.cfg
        preds = T.detached(decode3d(out3, self.anchors, cfg.scfi_score_thresh, cfg.nms_iou))
        rng = rng if rng is not None else np.random.default_rng(0)
        pairs = sample_pairs(preds, scene.gt_boxes3d, scene.projection, cfg.n_pairs, scene.image_size, rng,
                             cfg.scfi_score_thresh, cfg.scfi_pad_with_gt)
        if not pairs:
            return T.Tensor(0.0)
        point_feats = vs.feats if cfg.scfi_point_source == "before" else bev_as_voxels(vs, bev)
        fmap = maps["c5"] if cfg.scfi_image_source == "C5" else maps["p5"]
        return scfi_loss(pair_features(pairs, vs, point_feats, fmap), self.scfi, cfg.scfi_variant)

    def predict(self, scene):
        """3D detections plus the alignment map (when the fusion has one)."""
        with T.no_grad():
            out = self._predict_light(scene)
        dets = decode3d(out.head3d, self.anchors, self.cfg.score_thresh, self.cfg.nms_iou)
        return dets, out

    def _predict_light(self, scene):
        """Forward without the auxiliary 2D / SCFI branches (not needed at inference)."""
        head2d, scfi = self.head2d, self.scfi
        self.head2d = self.scfi = None
        try:
            return self.forward(scene, train=False)
        finally:
            self.head2d, self.scfi = head2d, scfi


def attention_mass(out, scene, stride):
    """Mean, over voxels inside a GT box, of attention mass inside that box's image projection."""
    if out.align is None or not scene.gt_boxes3d:
        return None
    vals = []
    centers = out.voxels.centers
    for b3, b2 in zip(scene.gt_boxes3d, scene.gt_boxes2d):
        for j in np.flatnonzero(b3.contains(centers)):
            vals.append(attention_mass_in_box(out.align.weights[j], b2, out.fmap_hw, stride))
    return float(np.mean(vals)) if vals else None


def build_model(cfg, scene_cfg=None):
    scene_cfg = scene_cfg or SceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    return Model(cfg, scene_cfg, rng)
