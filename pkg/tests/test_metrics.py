import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cipherline.geometry import BBox, Detection
from cipherline.inference import CandidateTable
from cipherline.metrics import MISSING, missing_rate, recall_at_iou, ser


def brute_force_distance(gt, pred):
    """Minimum S + D + I over all alignments, by recursion with memoization.

    MISSING matches any single GT symbol at zero cost. Written without the
    DP-table formulation used by the implementation.
    """
    memo = {}

    def go(i, j):
        if (i, j) in memo:
            return memo[(i, j)]
        if i == len(gt):
            best = len(pred) - j  # remaining predictions are insertions
        elif j == len(pred):
            best = len(gt) - i  # remaining GT symbols are deletions
        else:
            match = 0 if (pred[j] is MISSING or pred[j] == gt[i]) else 1
            best = min(go(i + 1, j + 1) + match, go(i + 1, j) + 1, go(i, j + 1) + 1)
        memo[(i, j)] = best
        return best

    return go(0, 0)


class TestSer:
    def test_exact_match(self):
        assert ser([1, 2, 3], [1, 2, 3]) == (0.0, 0, 0, 0)

    def test_single_substitution(self):
        rate, s, d, i = ser([1, 2, 3], [1, 9, 3])
        assert (rate, s, d, i) == (pytest.approx(1 / 3), 1, 0, 0)

    def test_single_deletion(self):
        rate, s, d, i = ser([1, 2, 3], [1, 3])
        assert (rate, s, d, i) == (pytest.approx(1 / 3), 0, 1, 0)

    def test_single_insertion(self):
        rate, s, d, i = ser([1, 2], [1, 9, 2])
        assert (rate, s, d, i) == (pytest.approx(1 / 2), 0, 0, 1)

    def test_missing_is_free(self):
        rate, s, d, i = ser([1, 2, 3], [1, MISSING, 3])
        assert (rate, s, d, i) == (0.0, 0, 0, 0)

    def test_all_missing(self):
        assert ser([4, 5], [MISSING, MISSING])[0] == 0.0

    def test_extra_missing_is_insertion(self):
        rate, s, d, i = ser([1], [1, MISSING])
        assert (s, d, i) == (0, 0, 1)

    def test_empty_prediction(self):
        rate, s, d, i = ser([1, 2, 3], [])
        assert (rate, s, d, i) == (1.0, 0, 3, 0)

    def test_empty_gt_raises(self):
        with pytest.raises(ValueError):
            ser([], [1])

    def test_rate_can_exceed_one(self):
        rate, _, _, _ = ser([1], [2, 3, 4])
        assert rate == 3.0

    def test_counts_sum_to_distance(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            gt = list(rng.integers(0, 4, size=rng.integers(1, 8)))
            pred = [
                MISSING if rng.random() < 0.2 else int(v)
                for v in rng.integers(0, 4, size=rng.integers(0, 8))
            ]
            rate, s, d, i = ser(gt, pred)
            assert s + d + i == brute_force_distance(gt, pred)
            assert rate == pytest.approx((s + d + i) / len(gt))

    def test_exhaustive_short_sequences(self):
        alphabet = [0, 1, MISSING]
        for ng in (1, 2, 3):
            for gt in itertools.product([0, 1], repeat=ng):
                for npred in (0, 1, 2, 3):
                    for pred in itertools.product(alphabet, repeat=npred):
                        _, s, d, i = ser(list(gt), list(pred))
                        assert s + d + i == brute_force_distance(gt, pred)

    @given(
        st.lists(st.integers(0, 3), min_size=1, max_size=7),
        st.lists(st.one_of(st.none(), st.integers(0, 3)), max_size=7),
    )
    @settings(max_examples=300, deadline=None)
    def test_property_matches_brute_force(self, gt, pred):
        _, s, d, i = ser(gt, pred)
        assert s + d + i == brute_force_distance(gt, pred)

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=8))
    def test_identity_zero(self, gt):
        assert ser(gt, gt) == (0.0, 0, 0, 0)


class TestMissingRate:
    def test_no_missing(self):
        assert missing_rate([1, 2], [1, 2]) == 0.0

    def test_half_missing(self):
        assert missing_rate([1, 2], [1, MISSING]) == 0.5

    def test_capped_at_one(self):
        assert missing_rate([1], [MISSING, MISSING, MISSING]) == 1.0

    def test_empty_gt_raises(self):
        with pytest.raises(ValueError):
            missing_rate([], [])


def table(dets, width=200):
    by_class = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    return CandidateTable(line_width=width, detections=by_class)


class TestRecall:
    def test_perfect(self):
        gt = [(BBox(0, 0, 20, 40), 1), (BBox(40, 0, 60, 40), 2)]
        dets = [Detection(b, c, 0.9) for b, c in gt]
        assert recall_at_iou(gt, table(dets)) == 1.0

    def test_wrong_class_no_credit(self):
        gt = [(BBox(0, 0, 20, 40), 1)]
        dets = [Detection(BBox(0, 0, 20, 40), 2, 0.9)]
        assert recall_at_iou(gt, table(dets)) == 0.0

    def test_one_to_one_matching(self):
        # two coincident detections cannot both claim the same GT box
        gt = [(BBox(0, 0, 20, 40), 1), (BBox(100, 0, 120, 40), 1)]
        dets = [
            Detection(BBox(0, 0, 20, 40), 1, 0.9),
            Detection(BBox(1, 0, 21, 40), 1, 0.8),
        ]
        assert recall_at_iou(gt, table(dets)) == 0.5

    def test_iou_threshold_respected(self):
        gt = [(BBox(0, 0, 10, 10), 1)]
        dets = [Detection(BBox(5, 0, 15, 10), 1, 0.9)]  # IoU = 1/3
        assert recall_at_iou(gt, table(dets), iou_threshold=0.5) == 0.0
        assert recall_at_iou(gt, table(dets), iou_threshold=0.3) == 1.0

    def test_empty_gt(self):
        assert recall_at_iou([], table([])) == 1.0
