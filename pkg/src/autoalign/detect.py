"""
Toy detection heads, non-maximum suppression and 40-point AP.

3D head: a 1x1 convolution over the BEV map producing, per cell, one
objectness logit, per-class logits and per-class box residuals against one
fixed anchor per class.  2D head: a single-anchor proposal stage on the
image feature map followed by an RoI stage over the top-K proposals.
The classification and regression forms (balanced BCE, CE, smooth-L1) are
conventional stand-ins.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Box2D, Box3D, iou_axis_aligned, iou_bev
from .layers import Conv2d, Linear, Module
from .scfi import roi_align_2d

RECALL_LEVELS = 40


@dataclass(frozen=True)
class DetectionBox:
    box: object
    score: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


LOSS_TERMS = ("l3d_cls", "l3d_reg", "l2d_rpn_cls", "l2d_rpn_reg", "l2d_rcnn_cls", "l2d_rcnn_reg", "l_scfi")


@dataclass
class LossBreakdown:
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @property
    def total(self):
        parts = [T.scale(v, self.weights.get(k, 1.0)) for k, v in self.terms.items()]
        if not parts:
            return T.Tensor(0.0)
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def as_floats(self):
        out = {k: float(v.item()) for k, v in self.terms.items()}
        out["total"] = float(self.total.item())
        return out


# ---------------------------------------------------------------------------
# shared pieces


def bce_balanced(logits, labels):
    """Mean BCE over positives plus mean BCE over negatives (each term only if present)."""
    labels = np.asarray(labels, dtype=np.float64)
    per = T.softplus(logits) - logits * labels
    loss = T.Tensor(0.0)
    for mask in (labels == 1, labels == 0):
        n = int(mask.sum())
        if n:
            loss = loss + T.scale(T.sum_(per * mask.astype(np.float64)), 1.0 / n)
    return loss


def cross_entropy(logits, targets):
    """Mean CE of rows of ``logits`` [n, k] against integer ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.eye(logits.shape[1])[targets]
    return T.neg(T.mean(T.sum_(T.log_softmax(logits, axis=1) * onehot, axis=1)))


def smooth_l1_mean(pred, target, beta=1.0 / 9.0):
    """Sum of smooth-L1 over components, averaged over rows (minimum 1 row)."""
    n = max(pred.shape[0], 1)
    return T.scale(T.sum_(T.smooth_l1(pred - target, beta)), 1.0 / n)


def _zero():
    return T.Tensor(0.0)


# ---------------------------------------------------------------------------
# 3D head


class Anchors3D:
    """One anchor per class per BEV cell, resting on the ground plane."""

    def __init__(self, spec, classes, ground_z):
        self.spec = spec
        self.xy = spec.cell_centers_bev().reshape(-1, 2)        # [X*Y, 2]
        self.sizes = np.array([(np.array(c.size_low) + np.array(c.size_high)) / 2 for c in classes])
        self.z = ground_z + self.sizes[:, 2] / 2                # [n_cls]
        self.shape = tuple(int(e) for e in spec.extents[:2])

    @property
    def n_cls(self):
        return len(self.sizes)

    def centers(self, cls):
        return np.column_stack([self.xy, np.full(len(self.xy), self.z[cls])])

    def encode(self, cls, box):
        """Residuals (dx, dy, dz, dl, dw, dh) of ``box`` against every cell's class-``cls`` anchor."""
        size = self.sizes[cls]
        diag = math.hypot(size[0], size[1])
        c = np.asarray(box.center)
        d = np.column_stack([(c[0] - self.xy[:, 0]) / diag, (c[1] - self.xy[:, 1]) / diag,
                             np.full(len(self.xy), (c[2] - self.z[cls]) / size[2])])
        dsize = np.log(np.asarray(box.size) / size)
        return np.hstack([d, np.tile(dsize, (len(self.xy), 1))])

    def decode(self, cell, cls, res):
        size = self.sizes[cls]
        diag = math.hypot(size[0], size[1])
        x, y = self.xy[cell]
        center = (x + res[0] * diag, y + res[1] * diag, self.z[cls] + res[2] * size[2])
        return Box3D(center, tuple(size * np.exp(np.clip(res[3:6], -4, 4))), 0.0, int(cls))


class Head3D(Module):
    def __init__(self, c_bev, n_cls, rng):
        self.conv = Conv2d(c_bev, 1 + n_cls + 6 * n_cls, 1, rng, gain=1.0)
        self.conv.bias.data[0] = -2.0    # start with low objectness everywhere
        self.n_cls = n_cls


@dataclass
class Head3DOutput:
    obj: T.Tensor     # [X*Y]
    cls: T.Tensor     # [X*Y, n_cls]
    reg: T.Tensor     # [X*Y, n_cls * 6]


def head3d_forward(bev, params):
    out = params.conv(bev)                             # [C, X, Y]
    C, X, Y = out.shape
    flat = T.transpose(T.reshape(out, (C, X * Y)))     # [X*Y, C]
    n = params.n_cls
    return Head3DOutput(flat[:, 0], flat[:, 1:1 + n], flat[:, 1 + n:])


def assign_targets3d(anchors, gt_boxes):
    """Per-cell labels: -1 background, else the index of the GT the cell is assigned to.

    A cell is positive when its class anchor centre lies inside the GT box;
    the cell holding the box centre is always positive so that boxes smaller
    than the cell pitch still get one.
    """
    assign = np.full(len(anchors.xy), -1, dtype=np.int64)
    X, Y = anchors.shape
    for g, box in enumerate(gt_boxes):
        inside = box.contains(anchors.centers(box.class_id))
        cx, cy = box.center[0], box.center[1]
        i = int(np.floor((cx - anchors.spec.range_min[0]) / anchors.spec.voxel_size[0]))
        j = int(np.floor((cy - anchors.spec.range_min[1]) / anchors.spec.voxel_size[1]))
        if 0 <= i < X and 0 <= j < Y:
            inside[i * Y + j] = True
        assign[inside & (assign < 0)] = g
    return assign


def loss3d(out, gt_boxes, anchors):
    """(l3d_cls, l3d_reg) for one scene."""
    assign = assign_targets3d(anchors, gt_boxes)
    pos = np.flatnonzero(assign >= 0)
    l_cls = bce_balanced(out.obj, (assign >= 0).astype(np.float64))
    if len(pos) == 0:
        return l_cls, _zero()
    labels = np.array([gt_boxes[assign[k]].class_id for k in pos])
    l_cls = l_cls + cross_entropy(T.take(out.cls, pos), labels)
    cols = (labels[:, None] * 6 + np.arange(6)).ravel()
    rows = np.repeat(pos, 6)
    pred = T.reshape(T.take(out.reg, (rows, cols)), (len(pos), 6))
    target = np.stack([anchors.encode(c, gt_boxes[assign[k]])[k] for k, c in zip(pos, labels)])
    return l_cls, smooth_l1_mean(pred, target)


def decode3d(out, anchors, score_thresh=0.3, nms_iou=0.1, max_boxes=50):
    """Thresholded, BEV-NMS'd detections from a head output."""
    scores = T._sigmoid(out.obj.data)
    keep = np.flatnonzero(scores >= score_thresh)
    if len(keep) == 0:
        return []
    order = keep[np.argsort(-scores[keep], kind="stable")][: 4 * max_boxes]
    cls = np.argmax(out.cls.data[order], axis=1)
    reg = out.reg.data.reshape(len(anchors.xy), anchors.n_cls, 6)
    dets = [DetectionBox(anchors.decode(k, c, reg[k, c]), float(scores[k]), int(c))
            for k, c in zip(order, cls)]
    return nms(dets, nms_iou, iou_fn=iou_bev)[:max_boxes]


# ---------------------------------------------------------------------------
# 2D head


def encode2d(anchor, box):
    aw, ah = anchor[2] - anchor[0], anchor[3] - anchor[1]
    ax, ay = anchor[0] + aw / 2, anchor[1] + ah / 2
    bw, bh = box[2] - box[0], box[3] - box[1]
    bx, by = box[0] + bw / 2, box[1] + bh / 2
    return np.array([(bx - ax) / aw, (by - ay) / ah, math.log(bw / aw), math.log(bh / ah)])


def decode2d(anchor, delta, image_size=None):
    aw, ah = anchor[2] - anchor[0], anchor[3] - anchor[1]
    ax, ay = anchor[0] + aw / 2, anchor[1] + ah / 2
    d = np.clip(np.asarray(delta, dtype=np.float64), -4, 4)
    x, y = ax + d[0] * aw, ay + d[1] * ah
    w, h = aw * math.exp(d[2]), ah * math.exp(d[3])
    box = np.array([x - w / 2, y - h / 2, x + w / 2, y + h / 2])
    if image_size is not None:
        H, W = image_size
        box = np.clip(box, 0, [W, H, W, H])
    return box


class Head2D(Module):
    def __init__(self, c, n_cls, rng, anchor_size=24.0, top_k=16, out=4):
        self.rpn = Conv2d(c, 5, 1, rng, gain=1.0)
        self.rpn.bias.data[0] = -2.0
        self.rcnn = Linear(c * out * out, n_cls + 1 + 4, rng, gain=1.0)
        self.n_cls = n_cls
        self.anchor_size = anchor_size
        self.top_k = top_k
        self.out = out

    def anchors(self, fmap):
        h, w = fmap.hw
        s = fmap.stride
        vv, uu = np.meshgrid(np.arange(h) * s, np.arange(w) * s, indexing="ij")
        half = self.anchor_size / 2
        return np.column_stack([uu.ravel() - half, vv.ravel() - half, uu.ravel() + half, vv.ravel() + half])


@dataclass
class Head2DOutput:
    rpn_obj: T.Tensor          # [h*w]
    rpn_reg: T.Tensor          # [h*w, 4]
    anchors: np.ndarray        # [h*w, 4]
    proposals: list            # Box2D
    rcnn_cls: object = None    # Tensor [K, n_cls + 1]
    rcnn_reg: object = None    # Tensor [K, 4]


def propose(out, image_size, top_k, nms_iou=0.7, min_size=2.0):
    scores = out.rpn_obj.data
    order = np.argsort(-scores, kind="stable")
    cands = []
    for k in order:
        b = decode2d(out.anchors[k], out.rpn_reg.data[k], image_size)
        if b[2] - b[0] >= min_size and b[3] - b[1] >= min_size:
            cands.append(DetectionBox(Box2D(*b), float(T._sigmoid(scores[k]))))
        if len(cands) >= 4 * top_k:
            break
    return [d.box for d in nms(cands, nms_iou)[:top_k]]


def head2d_forward(fmap, params, image_size, proposals=None, extra_proposals=()):
    """Dense proposal stage plus RoI classification over the chosen proposals.

    ``proposals`` overrides the top-K selection; ``extra_proposals`` (e.g.
    ground-truth boxes during training) are appended.
    """
    dense = params.rpn(fmap.feats)
    c, h, w = dense.shape
    flat = T.transpose(T.reshape(dense, (c, h * w)))
    out = Head2DOutput(flat[:, 0], flat[:, 1:5], params.anchors(fmap), [])
    if proposals is None:
        proposals = T.detached(propose(out, image_size, params.top_k))
    out.proposals = list(proposals) + list(extra_proposals)
    if out.proposals:
        pooled = T.stack([roi_align_2d(fmap, b, params.out).flat for b in out.proposals])
        logits = params.rcnn(pooled)
        n = params.n_cls + 1
        out.rcnn_cls, out.rcnn_reg = logits[:, :n], logits[:, n:]
    return out


def loss2d(out, gt_boxes2d, n_cls, pos_iou=0.5):
    """(rpn_cls, rpn_reg, rcnn_cls, rcnn_reg) for one image."""
    anchors = out.anchors
    n = len(anchors)
    centers = (anchors[:, :2] + anchors[:, 2:]) / 2
    assign = np.full(n, -1, dtype=np.int64)
    for g, b in enumerate(gt_boxes2d):
        inside = b.contains(centers[:, 0], centers[:, 1])
        inside[_nearest_anchor(b, centers)] = True
        assign[inside & (assign < 0)] = g
    pos = np.flatnonzero(assign >= 0)
    rpn_cls = bce_balanced(out.rpn_obj, (assign >= 0).astype(np.float64))
    if len(pos):
        target = np.stack([encode2d(anchors[k], gt_boxes2d[assign[k]].as_array()) for k in pos])
        rpn_reg = smooth_l1_mean(T.take(out.rpn_reg, pos), target)
    else:
        rpn_reg = _zero()
    if not out.proposals:
        return rpn_cls, rpn_reg, _zero(), _zero()
    labels = np.full(len(out.proposals), n_cls, dtype=np.int64)
    match = np.full(len(out.proposals), -1, dtype=np.int64)
    for i, p in enumerate(out.proposals):
        if gt_boxes2d:
            ious = [iou_axis_aligned(p, g) for g in gt_boxes2d]
            best = int(np.argmax(ious))
            if ious[best] >= pos_iou:
                labels[i], match[i] = gt_boxes2d[best].class_id, best
    rcnn_cls = cross_entropy(out.rcnn_cls, labels)
    rpos = np.flatnonzero(match >= 0)
    if len(rpos):
        target = np.stack([encode2d(out.proposals[i].as_array(), gt_boxes2d[match[i]].as_array()) for i in rpos])
        rcnn_reg = smooth_l1_mean(T.take(out.rcnn_reg, rpos), target)
    else:
        rcnn_reg = _zero()
    return rpn_cls, rpn_reg, rcnn_cls, rcnn_reg


def _nearest_anchor(box, centers):
    """Index of the anchor whose centre is nearest the box centre."""
    cu, cv = (box.u_min + box.u_max) / 2, (box.v_min + box.v_max) / 2
    return int(np.argmin((centers[:, 0] - cu) ** 2 + (centers[:, 1] - cv) ** 2))


def detections2d(out, image_size, score_thresh=0.3, nms_iou=0.5):
    """Refined 2D detections from the RoI stage."""
    if out.rcnn_cls is None:
        return []
    probs = np.exp(T.log_softmax(T.Tensor(out.rcnn_cls.data), axis=1).data)
    dets = []
    for i, p in enumerate(out.proposals):
        c = int(np.argmax(probs[i, :-1]))
        if probs[i, c] < score_thresh:
            continue
        b = decode2d(p.as_array(), out.rcnn_reg.data[i], image_size)
        if b[2] > b[0] and b[3] > b[1]:
            dets.append(DetectionBox(Box2D(*b, class_id=c), float(probs[i, c]), c))
    return nms(dets, nms_iou)


# ---------------------------------------------------------------------------
# NMS and AP


def nms(dets, iou_thresh=0.5, iou_fn=None):
    """Greedy suppression by descending score; ties go to the lower input index."""
    iou_fn = iou_fn or iou_axis_aligned
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if all(iou_fn(dets[i].box, dets[k].box) <= iou_thresh for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def _match(preds, gts, iou_thresh, iou_fn):
    """(score, is_tp) per prediction for one scene."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for i in order:
        best, best_iou = -1, iou_thresh
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = iou_fn(preds[i].box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
        out.append((preds[i].score, best >= 0))
    return out


def ap_from_matches(matches, n_gt, levels=RECALL_LEVELS):
    if n_gt == 0:
        return 1.0 if not matches else 0.0
    if not matches:
        return 0.0
    order = sorted(range(len(matches)), key=lambda i: -matches[i][0])
    tp = np.array([matches[i][1] for i in order], dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    total = 0.0
    for k in range(1, levels + 1):
        r = k / levels
        ok = recall >= r - 1e-12
        total += precision[ok].max() if ok.any() else 0.0
    return total / levels


def average_precision(preds, gts, iou_thresh=0.5, iou_fn=None):
    """40-point AP for one scene: ``preds`` are DetectionBoxes, ``gts`` boxes."""
    return average_precision_multi([preds], [gts], iou_thresh, iou_fn)


def average_precision_multi(pred_lists, gt_lists, iou_thresh=0.5, iou_fn=None):
    """40-point AP pooled over scenes (matching never crosses scenes)."""
    iou_fn = iou_fn or iou_axis_aligned
    matches, n_gt = [], 0
    for preds, gts in zip(pred_lists, gt_lists):
        matches += _match(list(preds), list(gts), iou_thresh, iou_fn)
        n_gt += len(gts)
    return ap_from_matches(matches, n_gt)


def per_class_ap(pred_lists, gt_lists, n_cls, iou_thresholds, iou_fn=None):
    out = []
    for c in range(n_cls):
        p = [[d for d in preds if d.class_id == c] for preds in pred_lists]
        g = [[b for b in gts if b.class_id == c] for gts in gt_lists]
        out.append(float(average_precision_multi(p, g, iou_thresholds[c], iou_fn)))
    return out


def map_over_classes(pred_lists, gt_lists, n_cls, iou_thresholds, iou_fn=None):
    return float(np.mean(per_class_ap(pred_lists, gt_lists, n_cls, iou_thresholds, iou_fn)))
