import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from islandseg.metrics import SCHEMES, ConfusionCounts, aggregate, confusion, f1, iou


def count_pixels(pred, gt):
    """Brute-force oracle: visit every pixel."""
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


class TestConfusion:
    def test_all_land(self):
        ones = np.ones((4, 4))
        assert confusion(ones, ones) == ConfusionCounts(16, 0, 0, 0)

    def test_all_wrong(self):
        assert confusion(np.ones((4, 4)), np.zeros((4, 4))) == ConfusionCounts(0, 16, 0, 0)

    def test_constructed(self):
        gt = np.zeros((4, 4), int)
        pred = np.zeros((4, 4), int)
        gt[0, :3] = 1          # three hits
        pred[0, :3] = 1
        pred[3, 3] = 1         # one false land
        gt[1, 0] = gt[2, 0] = 1  # two missed
        assert count_pixels(pred, gt) == (3, 1, 2, 10)
        assert confusion(pred, gt) == ConfusionCounts(3, 1, 2, 10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h, w = rng.integers(1, 20, 2)
            pred, gt = rng.random((h, w)) > 0.5, rng.random((h, w)) > 0.3
            c = confusion(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == count_pixels(pred, gt)
            assert c.total == h * w


class TestScores:
    def test_iou_hand(self):
        assert iou(ConfusionCounts(3, 1, 2, 10)) == 0.5

    def test_f1_hand(self):
        assert f1(ConfusionCounts(3, 1, 2, 10)) == pytest.approx(6 / 9, abs=1e-15)

    def test_perfect(self):
        c = ConfusionCounts(7, 0, 0, 9)
        assert iou(c) == f1(c) == 1.0

    def test_empty_positive(self):
        c = ConfusionCounts(0, 0, 0, 16)
        assert iou(c) == f1(c) == 1.0

    def test_no_hits(self):
        assert f1(ConfusionCounts(0, 2, 3, 1)) == 0.0
        assert iou(ConfusionCounts(0, 2, 3, 1)) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)


counts = st.builds(ConfusionCounts, st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6),
                   st.integers(0, 10**6))


@given(counts)
def test_dice_jaccard_identity(c):
    j = iou(c)
    assert abs(f1(c) - 2 * j / (1 + j)) <= 1e-12


@given(counts)
def test_monotone_in_tp(c):
    more = ConfusionCounts(c.tp + 1, c.fp, c.fn, c.tn)
    assert iou(more) >= iou(c)
    assert f1(more) >= f1(c)


@given(counts)
def test_swap_pred_gt_symmetry(c):
    swapped = ConfusionCounts(c.tp, c.fn, c.fp, c.tn)
    assert iou(swapped) == iou(c)
    assert f1(swapped) == f1(c)


@given(st.lists(counts, min_size=1, max_size=1), st.integers(1, 20))
def test_micro_copies_equal_single(cs, k):
    single = aggregate(cs, "micro-land")
    many = aggregate(cs * k, "micro-land")
    assert many.iou == pytest.approx(single.iou, abs=1e-15)
    assert many.f1 == pytest.approx(single.f1, abs=1e-15)


class TestAggregate:
    def test_single_image_micro_equals_macro_image(self):
        c = [ConfusionCounts(30, 5, 7, 58)]
        micro, macro = aggregate(c, "micro-land"), aggregate(c, "macro-image-land")
        assert micro.iou == macro.iou and micro.f1 == macro.f1

    def test_single_image_macro_class(self):
        c = ConfusionCounts(30, 5, 7, 58)
        r = aggregate([c], "macro-class")
        assert r.iou == pytest.approx((30 / 42 + 58 / 70) / 2)

    def test_two_images_equal_denominators(self):
        a = ConfusionCounts(2, 2, 1, 11)  # 2/5 = 0.4
        b = ConfusionCounts(4, 0, 1, 11)  # 4/5 = 0.8
        assert iou(a) == 0.4 and iou(b) == 0.8
        assert aggregate([a, b], "macro-image-land").iou == pytest.approx(0.6)
        # pooled-count oracle
        pred_a = np.array([1, 1, 1, 1, 0] + [0] * 11)
        gt_a = np.array([1, 1, 0, 0, 1] + [0] * 11)
        pred_b = np.array([1, 1, 1, 1, 0] + [0] * 11)
        gt_b = np.array([1, 1, 1, 1, 1] + [0] * 11)
        tp, fp, fn, _ = count_pixels(np.concatenate([pred_a, pred_b]), np.concatenate([gt_a, gt_b]))
        assert confusion(pred_a, gt_a) == a and confusion(pred_b, gt_b) == b
        assert aggregate([a, b], "micro-land").iou == pytest.approx(tp / (tp + fp + fn))

    def test_perfect_everywhere(self):
        cs = [ConfusionCounts(5, 0, 0, 11), ConfusionCounts(0, 0, 0, 16), ConfusionCounts(16, 0, 0, 0)]
        for s in SCHEMES:
            r = aggregate(cs, s)
            assert r.iou == r.f1 == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([], "micro-land")

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            aggregate([ConfusionCounts(1, 0, 0, 0)], "weighted")

    def test_per_image_listed(self):
        r = aggregate([ConfusionCounts(1, 1, 0, 2)], ids=["a"])
        assert r.per_image == [("a", 0.5, 2 / 3)]
