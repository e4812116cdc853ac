import numpy as np
import pytest

from mudet.geometry import DetectionRecord, ObbAnnotation, polygon_iou
from mudet.metrics import (MatchResult, PrCurve, average_precision,
                           emit_pr_csv, evaluate_dataset, match_detections,
                           precision_recall, read_pr_csv)


def det(x, y, w=6, h=3, theta=0.0, score=0.9, cls=0):
    return DetectionRecord(ObbAnnotation(cls, x, y, w, h, theta), score)


def gt(x, y, w=6, h=3, theta=0.0, cls=0):
    return ObbAnnotation(cls, x, y, w, h, theta)


def reference_matcher(dets, gts, thr):
    """Exhaustive double-loop matcher, no shared machinery with the impl."""
    order = sorted(dets, key=lambda d: (-d.score, d.obb.xc, d.obb.yc, d.obb.w,
                                        d.obb.h, d.obb.theta))
    used = [False] * len(gts)
    flags = []
    for d in order:
        best, best_iou = None, 0.0
        for j, g in enumerate(gts):
            if used[j] or g.class_id != d.obb.class_id:
                continue
            v = polygon_iou(d.obb, g)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return [d.score for d in order], flags


def brute_force_ap(dets, gts, thr):
    """Re-run matching from scratch at every distinct score threshold."""
    if not gts or not dets:
        return 0.0
    scores = sorted({d.score for d in dets}, reverse=True)
    ap, prev_r = 0.0, 0.0
    for t in scores:
        subset = [d for d in dets if d.score >= t]
        _, flags = reference_matcher(subset, gts, thr)
        tp = sum(flags)
        p = tp / len(subset)
        r = tp / len(gts)
        ap += p * (r - prev_r)
        prev_r = r
    return ap


def random_instance(rng, n_det=20, n_gt=10, span=30.0):
    gts = [gt(rng.uniform(0, span), rng.uniform(0, span), rng.uniform(3, 9),
              rng.uniform(2, 6), rng.uniform(-90, 90)) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if gts and rng.uniform() < 0.6:
            base = gts[rng.integers(0, len(gts))]
            dets.append(DetectionRecord(
                ObbAnnotation(0, base.xc + rng.normal(0, 1.0), base.yc + rng.normal(0, 1.0),
                              max(base.w + rng.normal(0, 0.8), 1.0),
                              max(base.h + rng.normal(0, 0.8), 1.0),
                              base.theta + rng.normal(0, 8)),
                float(rng.uniform(0.05, 0.95))))
        else:
            dets.append(det(rng.uniform(0, span), rng.uniform(0, span),
                            rng.uniform(3, 9), rng.uniform(2, 6),
                            rng.uniform(-90, 90), float(rng.uniform(0.05, 0.95))))
    return dets, gts


class TestMatchDetections:
    def test_exact_hit(self):
        m = match_detections([det(10, 10)], [gt(10, 10)])
        assert m.tp == 1 and m.fp == 0 and m.fn_count == 0
        assert m.matched_gt == [0]

    def test_duplicate_detections_single_match(self):
        m = match_detections([det(10, 10, score=0.8), det(10, 10, score=0.9)],
                             [gt(10, 10)])
        assert m.tp_flags == [True, False]
        assert m.scores == [0.9, 0.8]

    def test_class_must_agree(self):
        m = match_detections([det(10, 10, cls=1)], [gt(10, 10, cls=0)])
        assert m.tp == 0 and m.fn_count == 1

    def test_each_gt_used_once(self):
        m = match_detections([det(10, 10, score=0.9), det(10.5, 10, score=0.7)],
                             [gt(10, 10)])
        assert m.tp == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng)
        m = match_detections(dets, gts)
        ref_scores, ref_flags = reference_matcher(dets, gts, 0.5)
        assert m.scores == ref_scores
        assert m.tp_flags == ref_flags


class TestPrecisionRecall:
    def test_perfect(self):
        p, r = precision_recall(match_detections([det(5, 5)], [gt(5, 5)]))
        assert p == 1.0 and r == 1.0

    def test_zero_tp(self):
        m = MatchResult(scores=[0.9], tp_flags=[False], matched_gt=[None],
                        fn_count=0, n_gt=0)
        assert precision_recall(m) == (0.0, 0.0)

    def test_arithmetic(self):
        m = MatchResult(scores=[0.9, 0.8, 0.7, 0.6], tp_flags=[True, True, True, False],
                        matched_gt=[0, 1, 2, None], fn_count=1, n_gt=4)
        assert precision_recall(m) == (0.75, 0.75)


class TestAveragePrecision:
    def test_single_tp(self):
        ap, curve = average_precision([det(5, 5, score=0.9)], [gt(5, 5)])
        assert ap == 1.0
        assert curve.points == [(0.9, 1.0, 1.0)]

    def test_tp_then_fp_still_one(self):
        # recall hits 1 at full precision; the later FP adds delta-R = 0
        ap, curve = average_precision(
            [det(5, 5, score=0.9), det(50, 50, score=0.8)], [gt(5, 5)])
        assert ap == 1.0
        assert curve.points[0] == (0.9, 1.0, 1.0)
        assert curve.points[1][2] == 1.0

    def test_fp_then_tp(self):
        ap, _ = average_precision(
            [det(50, 50, score=0.9), det(5, 5, score=0.8)], [gt(5, 5)])
        assert ap == 0.5

    def test_no_gt_warns_zero(self):
        with pytest.warns(UserWarning):
            ap, _ = average_precision([det(5, 5)], [])
        assert ap == 0.0

    def test_no_dets(self):
        ap, curve = average_precision([], [gt(5, 5)])
        assert ap == 0.0 and curve.points == []

    @pytest.mark.parametrize("seed", range(20))
    def test_equals_brute_force(self, seed):
        rng = np.random.default_rng(100 + seed)
        n_det = int(rng.integers(1, 21))
        n_gt = int(rng.integers(1, 11))
        dets, gts = random_instance(rng, n_det, n_gt)
        ap, _ = average_precision(dets, gts)
        assert ap == brute_force_ap(dets, gts, 0.5)

    def test_score_ties_grouped(self):
        dets = [det(5, 5, score=0.5), det(50, 50, score=0.5)]
        ap, curve = average_precision(dets, [gt(5, 5)])
        assert len(curve.points) == 1
        assert curve.points[0] == (0.5, 0.5, 1.0)
        assert ap == 0.5

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        dets, gts = random_instance(rng, 15, 8)
        ap1, _ = average_precision(dets, gts)
        ap2, _ = average_precision(list(reversed(dets)), gts)
        assert ap1 == ap2

    def test_range_and_perfect_condition(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            dets, gts = random_instance(rng, 12, 6)
            ap, _ = average_precision(dets, gts)
            assert 0.0 <= ap <= 1.0
        # every gt matched above every fp -> AP exactly 1
        gts = [gt(0, 0), gt(30, 30)]
        dets = [det(0, 0, score=0.95), det(30, 30, score=0.9), det(60, 60, score=0.3)]
        ap, _ = average_precision(dets, gts)
        assert ap == 1.0

    def test_interpolated_never_lower(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            dets, gts = random_instance(rng, 15, 6)
            raw, _ = average_precision(dets, gts)
            interp, _ = average_precision(dets, gts, interpolated=True)
            assert interp >= raw - 1e-12

    def test_monotone_recall_curve(self):
        rng = np.random.default_rng(10)
        dets, gts = random_instance(rng, 20, 10)
        _, curve = average_precision(dets, gts)
        recalls = [r for _, _, r in curve.points]
        assert all(a <= b + 1e-12 for a, b in zip(recalls, recalls[1:]))


class TestEvaluateDataset:
    def test_pools_across_images(self):
        dets = {"a": [det(5, 5, score=0.9)], "b": [det(7, 7, score=0.8)]}
        gts = {"a": [gt(5, 5)], "b": [gt(7, 7)]}
        mean_ap, per_class = evaluate_dataset(dets, gts)
        assert mean_ap == 1.0
        assert per_class[0][0] == 1.0

    def test_multi_class_average(self):
        dets = {"a": [det(5, 5, score=0.9, cls=0), det(50, 50, score=0.9, cls=1)]}
        gts = {"a": [gt(5, 5, cls=0), gt(20, 20, cls=1)]}
        mean_ap, per_class = evaluate_dataset(dets, gts)
        assert per_class[0][0] == 1.0 and per_class[1][0] == 0.0
        assert mean_ap == 0.5

    def test_empty_gts_warns(self):
        with pytest.warns(UserWarning):
            mean_ap, per_class = evaluate_dataset({"a": [det(5, 5)]}, {"a": []})
        assert mean_ap == 0.0 and per_class == {}


class TestPrCsv:
    def test_round_trip(self, tmp_path):
        curve = PrCurve(points=[(0.9, 1.0, 0.333333), (0.5, 0.75, 0.666667),
                                (0.1, 0.6, 1.0)])
        path = tmp_path / "pr.csv"
        emit_pr_csv(curve, path)
        back = read_pr_csv(path)
        assert len(back.points) == 3
        for (t1, p1, r1), (t2, p2, r2) in zip(curve.points, back.points):
            assert abs(t1 - t2) < 1e-6 and abs(p1 - p2) < 1e-6 and abs(r1 - r2) < 1e-6

    def test_empty_curve_header_only(self, tmp_path):
        path = tmp_path / "pr.csv"
        emit_pr_csv(PrCurve(points=[]), path)
        assert path.read_text() == "threshold,precision,recall\n"

    def test_three_points_four_lines(self, tmp_path):
        path = tmp_path / "pr.csv"
        emit_pr_csv(PrCurve(points=[(0.9, 1.0, 0.2), (0.8, 1.0, 0.4), (0.7, 1.0, 0.6)]),
                    path)
        assert len(path.read_text().splitlines()) == 4

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            PrCurve(points=[(0.5, 1.0, 0.5), (0.9, 1.0, 0.2)])
