import numpy as np
import pytest

from hypercloud.common.errors import EmptyInput, LengthMismatch, ShapeMismatch
from hypercloud.services.hypercube_service import ClassMask
from hypercloud.services.metrics_service import (
    ClsScores,
    SegScores,
    classification_scores,
    cloudy_decision,
    confusion_matrix,
    dice,
    evaluate,
    pixel_accuracy,
    segmentation_scores,
)


def brute_dice(pred, truth, c):
    p, t = pred == c, truth == c
    denom = p.sum() + t.sum()
    return None if denom == 0 else 2.0 * (p & t).sum() / denom


def brute_cloudy(labels):
    cloud = sum(1 for v in labels.ravel() if v in (1, 2))
    return cloud / labels.size > 0.70


class TestPixelAccuracy:
    def test_identical(self):
        mask = ClassMask(np.array([[0, 1], [2, 1]], dtype=np.uint8))
        assert pixel_accuracy(mask, mask) == 1.0

    def test_shape_check(self):
        with pytest.raises(ShapeMismatch):
            pixel_accuracy(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            pixel_accuracy(np.zeros((0, 0)), np.zeros((0, 0)))


class TestDice:
    def test_half_covered_construction(self):
        pred = np.zeros(8, dtype=np.uint8)
        truth = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.uint8)
        per_class, macro = dice(pred, truth)
        assert per_class[0] == pytest.approx(2 / 3)
        assert per_class[1] == 0.0
        assert per_class[2] is None
        assert macro == pytest.approx(1 / 3)

    def test_identical_and_disjoint(self):
        a = np.array([0, 1, 1, 2], dtype=np.uint8)
        assert dice(a, a)[0] == (1.0, 1.0, 1.0)
        per_class, _ = dice(np.array([1, 1]), np.array([2, 2]))
        assert per_class == (None, 0.0, 0.0)

    def test_confusion_axes(self):
        cm = confusion_matrix(np.array([1, 1, 0]), np.array([0, 1, 0]))
        # rows are truth
        assert cm[0, 1] == 1 and cm[1, 1] == 1 and cm[0, 0] == 1
        assert cm.sum() == 3


class TestCloudyDecision:
    def test_rule(self):
        labels = np.array([1] * 40 + [2] * 35 + [0] * 25)
        assert cloudy_decision(labels)

    def test_exactly_seventy_percent_is_not_cloudy(self):
        assert not cloudy_decision(np.array([1] * 4 + [2] * 3 + [0] * 3))

    def test_clear(self):
        assert not cloudy_decision(ClassMask(np.zeros((4, 4), dtype=np.uint8)))

    def test_monotone(self, rng):
        labels = np.zeros(50, dtype=np.uint8)
        flipped = False
        for index in rng.permutation(50):
            labels[index] = 2
            now = cloudy_decision(labels)
            assert now or not flipped
            flipped = now
        assert flipped


class TestClassification:
    def test_counts(self):
        scores = classification_scores([True, True, False, False], [True, False, False, True])
        assert (scores.tp, scores.fp, scores.tn, scores.fn) == (1, 1, 1, 1)
        assert scores.accuracy == 0.5 and scores.f1 == 0.5

    def test_no_positives_gives_zero_f1(self):
        scores = classification_scores([False, False], [False, False])
        assert scores.accuracy == 1.0 and scores.f1 == 0.0

    def test_lengths(self):
        with pytest.raises(LengthMismatch):
            classification_scores([True], [True, False])
        with pytest.raises(LengthMismatch):
            classification_scores([], [])

    def test_round_trip(self):
        scores = classification_scores([True, False, True], [True, True, False])
        assert ClsScores.from_dict(scores.to_dict()) == scores


class TestOracles:
    @pytest.mark.parametrize("seed", range(100))
    def test_against_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        preds = [rng.integers(0, 3, size=(6, 6)) for _ in range(4)]
        truths = [rng.choice(3, size=(6, 6), p=rng.dirichlet([1, 1, 1])) for _ in range(4)]
        seg, cls = evaluate(preds, truths)

        p = np.concatenate([a.ravel() for a in preds])
        t = np.concatenate([a.ravel() for a in truths])
        assert seg.pixel_accuracy == pytest.approx(np.mean(p == t))
        expected = [brute_dice(p, t, c) for c in range(3)]
        for got, want in zip(seg.dice_per_class, expected):
            assert got == pytest.approx(want) if want is not None else got is None
        defined = [d for d in expected if d is not None]
        assert seg.dice_macro == pytest.approx(np.mean(defined))
        assert seg.pixels == 144

        pred_cloudy = [brute_cloudy(a) for a in preds]
        truth_cloudy = [brute_cloudy(a) for a in truths]
        agree = sum(a == b for a, b in zip(pred_cloudy, truth_cloudy))
        assert cls.accuracy == pytest.approx(agree / 4)
        assert 0.0 <= cls.f1 <= 1.0

    def test_symmetry(self, rng):
        a, b = rng.integers(0, 3, size=(8, 8)), rng.integers(0, 3, size=(8, 8))
        assert pixel_accuracy(a, b) == pixel_accuracy(b, a)
        assert dice(a, b)[0] == dice(b, a)[0]


class TestSegmentationScores:
    def test_cloud_dice_ignores_clear_class(self):
        scores = segmentation_scores([np.array([0, 1, 2, 2])], [np.array([1, 1, 2, 2])])
        assert scores.dice_cloud == pytest.approx((2 / 3 + 1.0) / 2)

    def test_lengths(self):
        with pytest.raises(LengthMismatch):
            segmentation_scores([np.zeros(3)], [])

    def test_round_trip(self):
        scores = segmentation_scores([np.array([0, 0, 1])], [np.array([0, 1, 1])])
        assert SegScores.from_dict(scores.to_dict()) == scores
