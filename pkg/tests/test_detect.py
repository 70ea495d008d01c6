import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autoalign import tensor as T
from autoalign.detect import (
    Anchors3D, DetectionBox, Head2D, Head3D, LossBreakdown, ap_from_matches, assign_targets3d,
    average_precision, average_precision_multi, bce_balanced, decode2d, decode3d, encode2d,
    head2d_forward, head3d_forward, loss2d, loss3d, map_over_classes, nms,
)
from autoalign.errors import UnsupportedRotationError
from autoalign.geometry import Box2D, Box3D, iou_bev
from autoalign.image import FeatureMap
from autoalign.points import VoxelGridSpec
from autoalign.scene import ObjectClass
from autoalign.tensor import Tensor, grad_check

SPEC = VoxelGridSpec((0, 0, -2), (4, 3, 2), (1, 1, 1))
CLASSES = [ObjectClass("big", (2.0, 1.0, 1.0), (2.0, 1.0, 1.0), (0, 0, 1), 0.0, 1.0),
           ObjectClass("small", (0.5, 0.5, 1.0), (0.5, 0.5, 1.0), (1, 0, 0), 0.0, 1.0)]
GROUND = -1.0


def _softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def _smooth_l1(x, beta=1 / 9):
    return 0.5 * x * x / beta if abs(x) < beta else abs(x) - 0.5 * beta


def _anchors():
    return Anchors3D(SPEC, CLASSES, GROUND)


def _zero_head(n_cls=2, c=3, seed=0):
    head = Head3D(c, n_cls, np.random.default_rng(seed))
    for p in head.parameters():
        p.data[...] = 0
    return head


class TestHead3D:
    def test_anchor_geometry(self):
        a = _anchors()
        assert a.shape == (4, 3) and len(a.xy) == 12
        np.testing.assert_allclose(a.z, [-0.5, -0.5])
        np.testing.assert_allclose(a.xy[4], [1.5, 1.5])

    def test_zero_weights_half_scores(self):
        out = head3d_forward(Tensor(np.random.default_rng(1).standard_normal((3, 4, 3))), _zero_head())
        np.testing.assert_allclose(T._sigmoid(out.obj.data), 0.5)
        assert decode3d(out, _anchors(), score_thresh=0.6) == []

    def test_one_forced_cell(self):
        head = _zero_head()
        head.conv.bias.data[0] = -10
        out = head3d_forward(Tensor(np.zeros((3, 4, 3))), head)
        out.obj.data[7] = 10.0
        out.cls.data[7] = [0.0, 1.0]
        dets = decode3d(out, _anchors(), score_thresh=0.5)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 1 and d.score == pytest.approx(1 / (1 + math.exp(-10)))
        # cell 7 -> (i=2, j=1): anchor centre (2.5, 1.5, -0.5), class-1 size
        assert d.box.center == pytest.approx((2.5, 1.5, -0.5)) and d.box.size == pytest.approx((0.5, 0.5, 1.0))

    def test_hand_built_decode_with_nms(self):
        head = _zero_head()
        head.conv.bias.data[0] = -10
        out = head3d_forward(Tensor(np.zeros((3, 4, 3))), head)
        a = _anchors()
        reg = out.reg.data.reshape(12, 2, 6)
        # cells 0 (0.5,0.5) and 3 (1.5,0.5) both class 0 (2x1 footprint): they overlap in BEV
        out.obj.data[[0, 3, 11]] = [2.0, 3.0, 1.0]
        out.cls.data[[0, 3, 11]] = [[1, 0], [1, 0], [0, 1]]
        diag = math.hypot(2.0, 1.0)
        reg[3, 0] = [0.5 / diag, 0, 0, math.log(1.5), 0, 0]   # shift +0.5 in x, length 3
        dets = decode3d(out, a, score_thresh=0.5, nms_iou=0.1)
        # expected: cell 3 (score sig(3)) kept; cell 0 overlaps it (IoU 2/3 > 0.1) and is dropped;
        # cell 11 at (3.5, 2.5) class 1 survives
        assert [round(d.score, 12) for d in dets] == [round(1 / (1 + math.exp(-3)), 12),
                                                       round(1 / (1 + math.exp(-1)), 12)]
        assert dets[0].box.center == pytest.approx((2.0, 0.5, -0.5))
        assert dets[0].box.size == pytest.approx((3.0, 1.0, 1.0))
        assert dets[1].box.center == pytest.approx((3.5, 2.5, -0.5)) and dets[1].class_id == 1

    def test_encode_decode_round_trip(self):
        a = _anchors()
        box = Box3D((2.2, 1.3, -0.4), (2.5, 1.2, 0.9), class_id=0)
        res = a.encode(0, box)[5]
        back = a.decode(5, 0, res)
        assert back.center == pytest.approx(box.center) and back.size == pytest.approx(box.size)

    def test_assignment_small_box_fallback(self):
        a = _anchors()
        # a 0.4 m box between cell centres still claims the cell holding its centre
        small = Box3D((1.0, 1.0, -0.5), (0.4, 0.4, 1.0), class_id=1)
        assign = assign_targets3d(a, [small])
        assert np.flatnonzero(assign >= 0).tolist() == [1 * 3 + 1]

    def test_no_gt_loss(self):
        head = _zero_head()
        head.conv.bias.data[0] = -10
        out = head3d_forward(Tensor(np.zeros((3, 4, 3))), head)
        l_cls, l_reg = loss3d(out, [], _anchors())
        assert l_cls.item() == pytest.approx(_softplus(-10), rel=1e-12) and l_cls.item() < 1e-4
        assert l_reg.item() == 0

    def test_perfect_regression(self):
        a = _anchors()
        box = Box3D((1.7, 1.4, -0.45), (2.3, 1.1, 1.1), class_id=0)
        out = head3d_forward(Tensor(np.zeros((3, 4, 3))), _zero_head())
        reg = out.reg.data.reshape(12, 2, 6)
        for k in np.flatnonzero(assign_targets3d(a, [box]) >= 0):
            reg[k, 0] = a.encode(0, box)[k]
        assert loss3d(out, [box], a)[1].item() == 0.0

    def test_single_positive_hand_value(self):
        a = _anchors()
        box = Box3D((2.6, 1.4, -0.5), (0.5, 0.5, 1.0), class_id=1)   # only cell (2, 1) = 7
        assert np.flatnonzero(assign_targets3d(a, [box]) >= 0).tolist() == [7]
        out = head3d_forward(Tensor(np.zeros((3, 4, 3))), _zero_head())
        out.obj.data[:] = -1.0
        out.obj.data[7] = 0.5
        out.cls.data[7] = [0.3, -0.2]
        reg = out.reg.data.reshape(12, 2, 6)
        reg[7, 1] = [0.1, 0.0, 0.0, 0.0, 0.0, 0.2]
        l_cls, l_reg = loss3d(out, [box], a)
        bce = _softplus(0.5) - 0.5 + _softplus(-1.0)   # positive mean + negative mean
        ce = -(-0.2 - math.log(math.exp(0.3) + math.exp(-0.2)))
        assert l_cls.item() == pytest.approx(bce + ce, rel=1e-12)
        diag = math.hypot(0.5, 0.5)
        target = [0.1 / diag, -0.1 / diag, 0.0, 0.0, 0.0, 0.0]
        pred = [0.1, 0.0, 0.0, 0.0, 0.0, 0.2]
        assert l_reg.item() == pytest.approx(sum(_smooth_l1(p - t) for p, t in zip(pred, target)), rel=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        head = Head3D(3, 2, rng)
        bev = Tensor(rng.standard_normal((3, 4, 3)), requires_grad=True)
        boxes = [Box3D((1.6, 1.4, -0.5), (2.1, 1.0, 1.0), class_id=0), Box3D((3.4, 2.6, -0.5), (0.6, 0.6, 1.0), class_id=1)]

        def f():
            c, r = loss3d(head3d_forward(bev, head), boxes, _anchors())
            return c + r

        assert grad_check(f, head.parameters() + [bev]) < 1e-6


class TestHead2D:
    def _setup(self, seed=0, c=2):
        rng = np.random.default_rng(seed)
        head = Head2D(c, 2, rng, anchor_size=8.0, top_k=4)
        fmap = FeatureMap(Tensor(rng.standard_normal((c, 3, 4)), requires_grad=True), 8)
        return head, fmap

    def test_encode_decode(self):
        anchor = np.array([0.0, 0.0, 8.0, 8.0])
        box = np.array([1.0, 2.0, 7.0, 12.0])
        np.testing.assert_allclose(decode2d(anchor, encode2d(anchor, box)), box, atol=1e-12)

    def test_zero_gt(self):
        head, fmap = self._setup()
        out = head2d_forward(fmap, head, (24, 32))
        rpn_cls, rpn_reg, rcnn_cls, rcnn_reg = loss2d(out, [], 2)
        scores = out.rpn_obj.data
        assert rpn_cls.item() == pytest.approx(np.mean([_softplus(s) for s in scores]), rel=1e-12)
        assert rpn_reg.item() == 0 and rcnn_reg.item() == 0
        logits = out.rcnn_cls.data
        bg = np.mean([-(row[2] - math.log(np.exp(row).sum())) for row in logits])
        assert rcnn_cls.item() == pytest.approx(bg, rel=1e-12)

    def test_gt_proposals_perfect_regression(self):
        head, fmap = self._setup()
        gts = [Box2D(2.0, 3.0, 14.0, 17.0, class_id=0), Box2D(18.0, 5.0, 28.0, 20.0, class_id=1)]
        out = head2d_forward(fmap, head, (24, 32), proposals=gts)
        out.rcnn_reg.data[...] = 0.0
        assert loss2d(out, gts, 2)[3].item() == 0.0

    def test_one_object_hand_values(self):
        head, fmap = self._setup(c=1)
        for p in head.parameters():
            p.data[...] = 0
        head.rpn.bias.data[:] = [0.4, 0.1, -0.1, 0.2, 0.0]
        gt = Box2D(6.0, 2.0, 18.0, 10.0, class_id=1)
        proposal = Box2D(6.0, 2.0, 18.0, 12.0)            # IoU = 96 / 120 = 0.8
        out = head2d_forward(fmap, head, (24, 32), proposals=[proposal])
        rpn_cls, rpn_reg, rcnn_cls, rcnn_reg = loss2d(out, [gt], 2)
        # anchors are 8x8, centred on lattice pixels (8u, 8v), u in 0..3, v in 0..2.
        # centres inside [6,18]x[2,10]: (8,8) and (16,8)
        anchors = out.anchors
        pos = [k for k in range(12) if 6 <= (anchors[k, 0] + 4) <= 18 and 2 <= (anchors[k, 1] + 4) <= 10]
        assert pos == [5, 6]
        bce = _softplus(0.4) - 0.4 + _softplus(0.4)
        assert rpn_cls.item() == pytest.approx(bce, rel=1e-12)
        delta = np.array([0.1, -0.1, 0.2, 0.0])
        reg = 0.0
        for k in pos:
            target = encode2d(anchors[k], gt.as_array())
            reg += sum(_smooth_l1(d - t) for d, t in zip(delta, target))
        assert rpn_reg.item() == pytest.approx(reg / 2, rel=1e-12)
        assert rcnn_cls.item() == pytest.approx(math.log(3.0), rel=1e-12)   # all-zero logits, 3 classes
        target = encode2d(proposal.as_array(), gt.as_array())
        assert rcnn_reg.item() == pytest.approx(sum(_smooth_l1(-t) for t in target), rel=1e-12)

    def test_top_k(self):
        head, fmap = self._setup()
        out = head2d_forward(fmap, head, (24, 32))
        assert 1 <= len(out.proposals) <= 4
        assert out.rcnn_cls.shape == (len(out.proposals), 3)

    def test_gradcheck(self):
        head, fmap = self._setup(seed=5)
        gts = [Box2D(2.0, 3.0, 14.0, 17.0, class_id=0)]
        props = [Box2D(3.0, 2.0, 15.0, 16.0), Box2D(10.0, 4.0, 30.0, 20.0)]

        def f():
            terms = loss2d(head2d_forward(fmap, head, (24, 32), proposals=props), gts, 2)
            return terms[0] + terms[1] + terms[2] + terms[3]

        assert grad_check(f, head.parameters() + [fmap.feats]) < 1e-6


class TestLossBreakdown:
    def test_total_is_sum(self):
        terms = {"l3d_cls": Tensor(1.5), "l3d_reg": Tensor(0.25), "l_scfi": Tensor(-0.5)}
        lb = LossBreakdown(terms)
        assert lb.total.item() == 1.25
        assert lb.as_floats()["total"] == 1.25

    def test_empty(self):
        assert LossBreakdown().total.item() == 0.0

    def test_bce_balanced_masks(self):
        x = Tensor([2.0, -1.0, 0.5])
        v = bce_balanced(x, [1, 0, 0]).item()
        assert v == pytest.approx(_softplus(-2.0) + (_softplus(-1.0) + _softplus(0.5)) / 2)


def _d2(u0, v0, u1, v1, s, c=0):
    return DetectionBox(Box2D(u0, v0, u1, v1, class_id=c), s, c)


class TestNms:
    def test_identical(self):
        b = Box2D(0, 0, 10, 10)
        kept = nms([DetectionBox(b, 0.8), DetectionBox(b, 0.9)])
        assert [d.score for d in kept] == [0.9]

    def test_disjoint(self):
        dets = [_d2(0, 0, 1, 1, 0.1), _d2(5, 5, 6, 6, 0.2), _d2(9, 9, 10, 10, 0.3)]
        assert len(nms(dets)) == 3

    def test_five_box_trace(self):
        dets = [
            _d2(0, 0, 10, 10, 0.9),    # A: kept
            _d2(1, 0, 11, 10, 0.8),    # B: IoU(A) = 90/110 > 0.5 -> suppressed
            _d2(6, 0, 16, 10, 0.7),    # C: IoU(A) = 40/160 = 0.25 -> kept
            _d2(7, 0, 17, 10, 0.6),    # D: IoU(C) = 90/110 -> suppressed
            _d2(0, 20, 5, 25, 0.95),   # E: disjoint, highest score -> kept first
        ]
        assert [d.score for d in nms(dets)] == [0.95, 0.9, 0.7]

    def test_order_independent_with_ties(self):
        dets = [_d2(0, 0, 10, 10, 0.5), _d2(0, 0, 10, 10, 0.5), _d2(20, 0, 30, 10, 0.7)]
        a = nms(dets)
        assert a[1] is dets[0]
        b = nms([dets[2], dets[0], dets[1]])
        assert [d.score for d in a] == [d.score for d in b]

    def test_rotated(self):
        dets = [DetectionBox(Box3D((0, 0, 0), (1, 1, 1), yaw=0.2), 0.9),
                DetectionBox(Box3D((0, 0, 0), (1, 1, 1)), 0.8)]
        with pytest.raises(UnsupportedRotationError):
            nms(dets)


class TestAveragePrecision:
    GTS = [Box2D(0, 0, 10, 10), Box2D(20, 0, 30, 10), Box2D(40, 0, 50, 10)]

    def test_hand_pr_table(self):
        preds = [DetectionBox(Box2D(0, 0, 10, 10), 0.9),      # TP
                 DetectionBox(Box2D(60, 0, 70, 10), 0.8),     # FP
                 DetectionBox(Box2D(20, 0, 30, 10), 0.7),     # TP
                 DetectionBox(Box2D(41, 0, 50, 10), 0.6)]     # TP (IoU 0.9)
        # recall 1/3 1/3 2/3 1 ; precision 1 1/2 2/3 3/4
        # levels 1..13 -> 1 ; levels 14..40 -> 3/4  => (13 + 27 * 0.75) / 40
        assert average_precision(preds, self.GTS) == 33.25 / 40

    def test_all_correct(self):
        preds = [DetectionBox(g, 0.5 + 0.1 * i) for i, g in enumerate(self.GTS)]
        assert average_precision(preds, self.GTS) == 1.0

    def test_none_correct(self):
        assert average_precision([DetectionBox(Box2D(90, 90, 99, 99), 0.9)], self.GTS) == 0.0

    def test_empty_conventions(self):
        assert average_precision([], []) == 1.0
        assert average_precision([DetectionBox(Box2D(0, 0, 1, 1), 0.2)], []) == 0.0
        assert average_precision([], self.GTS) == 0.0

    def test_each_gt_matched_once(self):
        preds = [DetectionBox(self.GTS[0], 0.9), DetectionBox(self.GTS[0], 0.8)]
        # second is FP: recall 1/3 max, precision 1 there -> 13 levels
        assert average_precision(preds, self.GTS) == 13 / 40

    def test_best_iou_among_candidates(self):
        gts = [Box2D(0, 0, 10, 10), Box2D(2, 0, 12, 10)]
        preds = [DetectionBox(Box2D(2, 0, 12, 10), 0.9), DetectionBox(Box2D(0, 0, 10, 10), 0.8)]
        assert average_precision(preds, gts) == 1.0

    def test_multi_scene_no_cross_matching(self):
        a = average_precision_multi([[DetectionBox(self.GTS[0], 0.9)], []], [[], [self.GTS[0]]])
        assert a == 0.0

    def test_demoting_tp_does_not_increase(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            scores = rng.random(4)
            kinds = [Box2D(0, 0, 10, 10), Box2D(60, 0, 70, 10), Box2D(20, 0, 30, 10), Box2D(90, 0, 99, 10)]
            preds = [DetectionBox(b, float(s)) for b, s in zip(kinds, scores)]
            base = average_precision(preds, self.GTS)
            demoted = list(preds)
            demoted[0] = DetectionBox(kinds[0], float(scores.min()) * 0.5)
            assert average_precision(demoted, self.GTS) <= base + 1e-15

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 1.0), st.booleans()), max_size=12), st.integers(0, 8))
    def test_range(self, matches, n_gt):
        n_gt = max(n_gt, sum(tp for _, tp in matches))
        ap = ap_from_matches(matches, n_gt)
        assert 0.0 <= ap <= 1.0

    def test_map_over_classes(self):
        gts = [[Box2D(0, 0, 10, 10, class_id=0), Box2D(20, 0, 30, 10, class_id=1)]]
        preds = [[DetectionBox(Box2D(0, 0, 10, 10, class_id=0), 0.9, 0)]]
        assert map_over_classes(preds, gts, 2, [0.5, 0.5]) == 0.5

    def test_bev_iou_fn(self):
        gts = [Box3D((5, 0, 0), (2, 2, 2))]
        preds = [DetectionBox(Box3D((5, 0, 3), (2, 2, 2)), 0.9)]
        assert average_precision(preds, gts, 0.5, iou_bev) == 1.0
        assert average_precision(preds, gts, 0.5) == 0.0
