import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vistok.metrics import depth_metrics, mask_iou, mask_metrics

from oracles import scalar_depth_metrics


class TestDepthMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).uniform(0.5, 10.0, (8, 8))
        m = depth_metrics(gt, gt)
        assert m.rmse == 0.0
        assert m.rel == 0.0
        assert m.log10 == 0.0
        assert m.delta1 == 1.0

    def test_strict_threshold_boundary(self):
        gt = np.full((4, 4), 2.0)
        m = depth_metrics(gt * 1.25, gt)
        # ratio is exactly 1.25: strict inequality keeps it out of delta1
        assert m.delta1 == 0.0
        assert m.delta2 == 1.0
        assert np.isclose(m.rel, 0.25)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(0.5, 10.0, (16, 16))
        pred = gt * rng.uniform(0.7, 1.4, (16, 16))
        valid = rng.random((16, 16)) > 0.3
        got = depth_metrics(pred, gt, valid)
        want = scalar_depth_metrics(pred, gt, valid)
        for key, val in want.items():
            assert np.isclose(getattr(got, key), val, atol=1e-6), key

    def test_delta_ordering_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        gt = rng.uniform(0.5, 10.0, (12, 12))
        pred = gt * rng.uniform(0.5, 2.0, (12, 12))
        m = depth_metrics(pred, gt)
        assert 0.0 <= m.delta1 <= m.delta2 <= m.delta3 <= 1.0
        scaled = depth_metrics(pred * 3.0, gt * 3.0)
        assert np.isclose(scaled.delta1, m.delta1)
        assert np.isclose(scaled.rel, m.rel)
        assert np.isclose(scaled.rmse, 3.0 * m.rmse)

    def test_invalid_pixels_ignored(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(1.0, 5.0, (8, 8))
        pred = gt.copy()
        valid = np.ones((8, 8), dtype=bool)
        valid[0] = False
        pred_garbage = pred.copy()
        pred_garbage[0] = 1e6
        a = depth_metrics(pred, gt, valid)
        b = depth_metrics(pred_garbage, gt, valid)
        assert a == b

    def test_empty_valid_rejected(self):
        with pytest.raises(ValueError, match="valid"):
            depth_metrics(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))

    def test_nonpositive_gt_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            depth_metrics(np.ones((2, 2)), np.zeros((2, 2)))


def square(r0, c0, r1, c1, size=32):
    m = np.zeros((size, size), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


class TestMaskIoU:
    def test_identical(self):
        assert mask_iou(square(0, 0, 8, 8), square(0, 0, 8, 8)) == 1.0

    def test_disjoint(self):
        assert mask_iou(square(0, 0, 8, 8), square(16, 16, 24, 24)) == 0.0

    def test_half_overlap(self):
        a = square(0, 0, 8, 8)
        b = square(0, 4, 8, 12)
        assert np.isclose(mask_iou(a, b), (8 * 4) / (8 * 12))

    def test_both_empty(self):
        assert mask_iou(np.zeros((4, 4), dtype=bool), np.zeros((4, 4), dtype=bool)) == 1.0


class TestMaskMetrics:
    def test_identical_lists(self):
        gt = [(0, square(0, 0, 8, 8)), (1, square(16, 16, 28, 28))]
        m = mask_metrics(gt, gt)
        assert m.mean_iou == 1.0
        assert m.ap == 1.0

    def test_both_empty(self):
        m = mask_metrics([], [])
        assert m.ap == 1.0
        assert m.mean_iou == 1.0

    def test_prediction_against_empty_gt(self):
        m = mask_metrics([(0, square(0, 0, 8, 8))], [])
        assert m.ap == 0.0

    def test_missed_gt(self):
        m = mask_metrics([], [(0, square(0, 0, 8, 8))])
        assert m.ap == 0.0

    def test_duplicate_predictions_hand_enumerated(self):
        # one gt, two identical perfect predictions: greedy matches one (TP),
        # leaves one false positive -> every threshold scores 1/(1+1+0)
        gt = [(0, square(4, 4, 12, 12))]
        pred = [(0, square(4, 4, 12, 12)), (0, square(4, 4, 12, 12))]
        m = mask_metrics(pred, gt)
        assert np.isclose(m.ap, 0.5)
        assert np.isclose(m.mean_iou, 1.0 / 2.0)  # matched IoU 1 over TP+FP

    def test_class_confusion_never_matches(self):
        gt = [(0, square(0, 0, 8, 8))]
        pred = [(1, square(0, 0, 8, 8))]
        m = mask_metrics(pred, gt)
        assert m.ap == 0.0
        assert m.mean_iou == 0.0

    def test_threshold_sweep_hand_case(self):
        # single pair with IoU 0.6: counts as TP for thresholds .5, .55, .6;
        # ...IoU strictly below the threshold fails the match
        gt_mask = square(0, 0, 10, 10)
        pred_mask = square(0, 0, 10, 6)  # IoU = 60/100 = 0.6
        m = mask_metrics([(0, pred_mask)], [(0, gt_mask)])
        passing = sum(1 for t in np.arange(0.5, 0.96, 0.05) if 0.6 >= t - 1e-9)
        want_ap = (passing * 1.0 + (10 - passing) * 0.0) / 10
        assert np.isclose(m.ap, want_ap)
        assert np.isclose(m.mean_iou, 0.6)

    def test_greedy_prefers_highest_iou(self):
        gt = [(0, square(0, 0, 8, 8))]
        pred = [(0, square(0, 4, 8, 12)), (0, square(0, 0, 8, 8))]
        m = mask_metrics(pred, gt)
        # the exact-overlap prediction wins the match; the other is FP
        assert np.isclose(m.mean_iou, 1.0 / 2.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 4), st.integers(0, 10_000))
    def test_ap_bounded(self, n, seed):
        rng = np.random.default_rng(seed)
        insts = []
        for _ in range(n):
            r0, c0 = rng.integers(0, 20, 2)
            insts.append((int(rng.integers(0, 2)),
                          square(r0, c0, r0 + rng.integers(2, 10), c0 + rng.integers(2, 10))))
        m = mask_metrics(insts, insts)
        assert m.ap == 1.0
        assert m.mean_iou == 1.0
