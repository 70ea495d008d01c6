"""
Paired region features and the instance-level cross-modal similarity loss.

A 3D box is pooled from voxel features (``roi_pool_3d``) and its image
projection is pooled from an image feature map (``roi_align_2d``).  Each
modality has its own projector ``h`` and predictor ``f``; the default loss
pulls the prediction of one modality towards the (gradient-stopped)
projection of the other, in both directions.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BehindCameraError, DegenerateBoxError, DimensionError, EmptyBatchError
from .geometry import _require_axis_aligned, project_box3d
from .image import pixel_to_index
from .layers import MLP, Module

IMAGE_SOURCES = ("C5", "P5")
POINT_SOURCES = ("before", "after")
LOSS_VARIANTS = ("ncs_pos", "symmetric_no_stopgrad", "nce", "infonce", "ce_pos")
TEMPERATURE = 0.1


@dataclass
class RoiFeature:
    source: str
    grid: T.Tensor      # [out, out, c] (2D) or [out, out, out, c] (3D)

    @property
    def flat(self):
        return T.reshape(self.grid, (self.grid.size,))


def roi_align_2d(fmap, box, out=4, source="image_C5"):
    """Sample one bilinear point at the centre of each of out x out cells."""
    u0, u1 = pixel_to_index([box.u_min, box.u_max], fmap.stride)
    v0, v1 = pixel_to_index([box.v_min, box.v_max], fmap.stride)
    if not (u1 > u0 and v1 > v0):
        raise DegenerateBoxError(f"RoI {box} has zero area on the feature lattice")
    frac = (np.arange(out) + 0.5) / out
    us, vs = u0 + frac * (u1 - u0), v0 + frac * (v1 - v0)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    samples = T.bilinear_sample_many(fmap.feats, uu.ravel(), vv.ravel())
    return RoiFeature(source, T.reshape(samples, (out, out, fmap.channels)))


def roi_cell_index(centers, box, out=4):
    """Flat x-major cell index of each centre inside ``box``, or -1 outside."""
    _require_axis_aligned(box)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    inside = box.contains(centers) if len(centers) else np.zeros(0, dtype=bool)
    rel = (centers - box.minimum) / np.asarray(box.size)
    cell = np.clip(np.floor(rel * out).astype(np.int64), 0, out - 1)
    flat = (cell[:, 0] * out + cell[:, 1]) * out + cell[:, 2]
    return np.where(inside, flat, -1)


def roi_pool_3d(vs, box, out=4, feats=None, source="point_before_backbone"):
    """Max-pool voxel features into an out^3 grid over ``box``; empty cells are zero."""
    feats = vs.feats if feats is None else feats
    cell = roi_cell_index(vs.centers, box, out)
    keep = np.flatnonzero(cell >= 0)
    d = feats.shape[1]
    if len(keep) == 0:
        grid = T.Tensor(np.zeros((out ** 3, d)))
    else:
        grid = T.scatter_max(T.take(feats, keep), cell[keep], out ** 3)
    return RoiFeature(source, T.reshape(grid, (out, out, out, d)))


def bev_as_voxels(vs, bev):
    """Re-express a [c, X, Y] BEV map as per-voxel features at the occupied voxels.

    Lets the "after backbone" source share the 3D pooling path: every
    occupied voxel carries its column's BEV feature.
    """
    c, X, Y = bev.shape
    flat = T.transpose(T.reshape(bev, (c, X * Y)))
    cols = vs.coords[:, 0] * Y + vs.coords[:, 1]
    return T.take(flat, cols)


class ScfiHeads(Module):
    """Projector (in -> hidden -> out) and predictor (out -> hidden -> out) per modality."""

    def __init__(self, in_3d, in_2d, rng, hidden=512, out=2048):
        self.h3 = MLP([in_3d, hidden, out], rng)
        self.f3 = MLP([out, hidden, out], rng)
        self.h2 = MLP([in_2d, hidden, out], rng)
        self.f2 = MLP([out, hidden, out], rng)

    def point_side(self):
        return self.h3.parameters() + self.f3.parameters()

    def image_side(self):
        return self.h2.parameters() + self.f2.parameters()


def ncs_distance(p, q, eps=T.L2_EPS):
    """Negative cosine similarity along the last axis."""
    return T.neg(T.sum_(T.l2_normalize(p, eps=eps) * T.l2_normalize(q, eps=eps), axis=-1))


def _cosine_matrix(p, q):
    return T.matmul(T.l2_normalize(p), T.transpose(T.l2_normalize(q)))


def _log_sigmoid(x):
    return T.neg(T.softplus(T.neg(x)))


def _contrastive(p, q, variant, tau):
    """Per-row loss of predictions p [N, k] against targets q [N, k].

    ``ce_pos`` (positive-only -log sigmoid(cos / tau)) is a stand-in form;
    no reference definition of that loss exists.
    """
    n = p.shape[0]
    if variant == "ce_pos":
        return T.neg(_log_sigmoid(T.scale(T.neg(ncs_distance(p, q)), 1.0 / tau)))
    logits = T.scale(_cosine_matrix(p, q), 1.0 / tau)
    eye = np.eye(n)
    if variant == "infonce":
        return T.neg(T.sum_(T.log_softmax(logits, axis=1) * eye, axis=1))
    # binary logistic: positives on the diagonal, in-batch negatives elsewhere
    pos = T.sum_(_log_sigmoid(logits) * eye, axis=1)
    if n == 1:
        return T.neg(pos)
    neg = T.sum_(_log_sigmoid(T.neg(logits)) * (1.0 - eye), axis=1)
    return T.neg(pos + T.scale(neg, 1.0 / (n - 1)))


def scfi_loss(pairs, heads, variant="ncs_pos", tau=TEMPERATURE):
    """Symmetric cross-modal loss averaged over pairs of flat (R3D, R2D) features.

    ``heads`` needs callables ``h3, f3, h2, f2``.  Every variant except
    ``symmetric_no_stopgrad`` stops gradients through the projection targets.
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown SCFI loss variant {variant!r}; choose from {LOSS_VARIANTS}")
    if not pairs:
        raise EmptyBatchError("scfi_loss needs at least one (3D, 2D) pair")
    r3 = T.stack([T._as_tensor(a) for a, _ in pairs])
    r2 = T.stack([T._as_tensor(b) for _, b in pairs])
    z1, z2 = heads.h3(r3), heads.h2(r2)
    p1, p2 = heads.f3(z1), heads.f2(z2)
    if variant != "symmetric_no_stopgrad":
        z1, z2 = T.stopgrad(z1), T.stopgrad(z2)
    if variant in ("ncs_pos", "symmetric_no_stopgrad"):
        per_pair = ncs_distance(p1, z2) + ncs_distance(p2, z1)
    else:
        per_pair = _contrastive(p1, z2, variant, tau) + _contrastive(p2, z1, variant, tau)
    return T.scale(T.mean(per_pair), 0.5)


def sample_pairs(preds3d, gt_boxes3d, proj, n, image_size, rng, score_thresh=0.3, pad_with_gt=True):
    """Choose up to ``n`` 3D boxes and pair each with its image projection.

    Confident predictions come first; ground truth pads the pool when there
    are fewer than ``n``.  Boxes whose projection is unusable are dropped
    before sampling.
    """
    if n < 1:
        raise ValueError("need n >= 1 pairs")
    def project_all(boxes):
        out = []
        for b in boxes:
            try:
                out.append((b, project_box3d(proj, b, image_size)))
            except (BehindCameraError, DegenerateBoxError):
                continue
        return out

    usable = project_all(p.box for p in preds3d if p.score >= score_thresh)
    if len(usable) < n and pad_with_gt:
        gts = list(gt_boxes3d)
        usable += project_all(gts[i] for i in rng.permutation(len(gts)))[: n - len(usable)]
    if len(usable) <= n:
        return usable
    pick = np.sort(rng.choice(len(usable), size=n, replace=False))
    return [usable[i] for i in pick]


def pooled_dims(d_point, c_image, out=4):
    return d_point * out ** 3, c_image * out ** 2


def pair_features(pairs, point_vs, point_feats, fmap, out=4):
    """Flat (R3D, R2D) tensors for each sampled (Box3D, Box2D)."""
    if point_feats.shape[0] != len(point_vs):
        raise DimensionError("point features must have one row per voxel")
    return [(roi_pool_3d(point_vs, b3, out, feats=point_feats).flat, roi_align_2d(fmap, b2, out).flat)
            for b3, b2 in pairs]


__all__ = [
    "RoiFeature", "roi_align_2d", "roi_pool_3d", "roi_cell_index", "bev_as_voxels", "ScfiHeads",
    "ncs_distance", "scfi_loss", "sample_pairs", "pooled_dims", "pair_features",
    "IMAGE_SOURCES", "POINT_SOURCES", "LOSS_VARIANTS",
]
