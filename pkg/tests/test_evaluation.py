from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fous.evaluation import (
    EvalReport,
    GalleryImage,
    evaluate_detection,
    person_search_metrics,
    ranking_average_precision,
    search_query,
)

B = [10.0, 10.0, 30.0, 60.0]
B_SHIFT = [12.0, 11.0, 32.0, 61.0]  # overlaps B with IoU > 0.5
C = [60.0, 10.0, 80.0, 60.0]


def hand_gallery():
    """Four images: the identity-1 image also holds a weaker duplicate of the same person."""
    return [
        GalleryImage(np.array([B, B_SHIFT]), np.array([[0.6, 0.8], [-0.6, -0.8]]), np.array([B]), np.array([1])),
        GalleryImage(np.array([B]), np.array([[0.8, 0.6]]), np.array([B]), np.array([2])),
        GalleryImage(np.array([B, C]), np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([B, C]), np.array([1, 2])),
        GalleryImage(np.array([B]), np.array([[0.28, 0.96]]), np.array([B]), np.array([3])),
    ]


class TestDetection:
    def test_staircase(self):
        gt = [np.array([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10]], dtype=float)]
        preds = [(np.array([[0, 0, 10, 10], [60, 0, 70, 10], [20, 0, 30, 10], [80, 0, 90, 10]], dtype=float),
                  np.array([0.9, 0.8, 0.7, 0.6]))]
        ap, recall = evaluate_detection(preds, gt)
        # precision 1, 1/2, 2/3, 1/2 at recall 1/3, 1/3, 2/3, 2/3 -> 1/3 * 1 + 1/3 * 2/3
        assert ap == pytest.approx(5 / 9, abs=1e-12)
        assert recall == pytest.approx(2 / 3, abs=1e-12)

    def test_duplicate_is_false_positive(self):
        gt = [np.array([[0, 0, 10, 10]], dtype=float)]
        preds = [(np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float), np.array([0.9, 0.8]))]
        assert evaluate_detection(preds, gt) == (1.0, 1.0)

    def test_no_predictions(self):
        assert evaluate_detection([(np.zeros((0, 4)), np.zeros(0))], [np.array([B])]) == (0.0, 0.0)

    def test_no_ground_truth(self):
        with pytest.raises(ValueError, match="no ground truth"):
            evaluate_detection([(np.array([B]), np.array([1.0]))], [np.zeros((0, 4))])


class TestRanking:
    def test_ap_of_ranking(self):
        assert ranking_average_precision([1, 0, 1], 2) == pytest.approx((1 + 2 / 3) / 2)
        # one positive never retrieved
        assert ranking_average_precision([0, 1], 2) == pytest.approx(0.25)
        assert ranking_average_precision([0, 0], 0) == 0.0

    def test_hand_gallery(self):
        gallery = hand_gallery()
        q1 = search_query(np.array([0.6, 0.8]), 1, gallery)
        q2 = search_query(np.array([0.0, 1.0]), 2, gallery)
        # q1 ranking: pos, neg, neg, pos, neg(duplicate) ; q2: neg, neg, neg, pos, pos, neg
        ap1, ap2 = Fraction(1, 2) * (1 + Fraction(2, 4)), Fraction(1, 2) * (Fraction(1, 4) + Fraction(2, 5))
        assert q1 == (pytest.approx(float(ap1), abs=1e-15), True, 2)
        assert q2 == (pytest.approx(float(ap2), abs=1e-15), False, 2)
        report = person_search_metrics([(np.array([0.6, 0.8]), 1, None), (np.array([0.0, 1.0]), 2, None)], gallery)
        assert report.map == pytest.approx(float((ap1 + ap2) / 2), abs=1e-15)
        assert float((ap1 + ap2) / 2) == 43 / 80
        assert report.top1 == 0.5 and report.n_queries == 2

    def test_own_scene_skipped(self):
        gallery = hand_gallery()
        res = search_query(np.array([0.6, 0.8]), 1, gallery, skip=0)
        # only the positive in image 2 remains: ranks g1(.96), g3(.936), g2B(.8)
        assert res == (pytest.approx(1 / 3), False, 1)

    def test_excluded_query(self):
        report = person_search_metrics([(np.array([1.0, 0.0]), 3, 3)], hand_gallery())
        assert report.n_queries == 0 and report.n_excluded == 1 and report.map == 0.0

    def test_oracle_features(self, rng):
        ids = np.arange(5)
        onehot = np.eye(5)
        gallery, queries = [], []
        for g in range(6):
            chosen = rng.choice(ids, size=2, replace=False)
            boxes = np.array([B, C])
            gallery.append(GalleryImage(boxes, onehot[chosen], boxes, chosen))
        for pid in ids:
            own = next(g for g, img in enumerate(gallery) if pid in img.gt_ids)
            queries.append((onehot[pid], pid, own))
        report = person_search_metrics(queries, gallery)
        assert report.n_queries > 0
        assert report.map == 1.0 and report.top1 == 1.0

    def test_report_roundtrip(self):
        r = EvalReport(0.5, 0.25, 0.75, 0.8, 2, 1, [{"query": 0, "ap": 0.5}])
        assert EvalReport.from_json(r.to_json()) == r

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_distractors_never_raise_map(self, seed, n_extra):
        rng = np.random.default_rng(seed)
        gallery = []
        for _ in range(5):
            ids = rng.choice(4, size=2, replace=False)
            gallery.append(GalleryImage(np.array([B, C]), rng.normal(size=(2, 3)), np.array([B, C]), ids))
        queries = [(rng.normal(size=3), pid, None) for pid in range(4)]
        before = person_search_metrics(queries, gallery)
        for _ in range(n_extra):
            gallery.append(GalleryImage(np.array([B]), rng.normal(size=(1, 3)), np.array([B]), np.array([99])))
        after = person_search_metrics(queries, gallery)
        assert 0.0 <= after.map <= before.map + 1e-12 <= 1.0 + 1e-12
        assert 0.0 <= after.top1 <= 1.0
