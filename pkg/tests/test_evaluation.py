import math

import numpy as np
import pytest

from sfodkit.evaluation import (
    FP,
    IGNORED,
    TP,
    GtBox,
    average_precision,
    corruption_table,
    evaluate,
    match_detections,
    methods_table,
    read_detections,
    read_ground_truth,
    write_detections,
    write_ground_truth,
)
from sfodkit.geometry import OrientedBox, rotated_iou
from sfodkit.pseudo_label import PseudoLabel
from oracles import reference_voc_eval


def pl(cx, cy, w, h, theta, cls, score):
    return PseudoLabel(OrientedBox(cx, cy, w, h, theta), cls, score)


def gt(cx, cy, w, h, theta, cls, difficult=False):
    return GtBox(OrientedBox(cx, cy, w, h, theta), cls, difficult)


class TestMatchDetections:
    def test_exact_hit_is_tp(self):
        order, flags = match_detections([pl(5, 5, 4, 2, 0.3, 0, 0.9)],
                                        [gt(5, 5, 4, 2, 0.3, 0)])
        assert flags == [TP]

    def test_double_detection_one_to_one(self):
        dets = [pl(5, 5, 4, 2, 0, 0, 0.9), pl(5, 5, 4, 2, 0, 0, 0.7)]
        order, flags = match_detections(dets, [gt(5, 5, 4, 2, 0, 0)])
        assert order == [0, 1]
        assert flags == [TP, FP]

    def test_low_iou_is_fp(self):
        det = pl(0, 0, 2, 2, 0, 0, 0.9)
        truth = gt(1.3, 0, 2, 2, 0, 0)
        assert rotated_iou(det.box, truth.box) < 0.5
        _, flags = match_detections([det], [truth])
        assert flags == [FP]

    def test_wrong_class_is_fp(self):
        _, flags = match_detections([pl(5, 5, 4, 2, 0, 1, 0.9)],
                                    [gt(5, 5, 4, 2, 0, 0)])
        assert flags == [FP]

    def test_difficult_match_ignored(self):
        _, flags = match_detections([pl(5, 5, 4, 2, 0, 0, 0.9)],
                                    [gt(5, 5, 4, 2, 0, 0, difficult=True)])
        assert flags == [IGNORED]

    def test_visits_by_score_descending(self):
        dets = [pl(0, 0, 2, 2, 0, 0, 0.2), pl(0, 0, 2, 2, 0, 0, 0.8)]
        order, flags = match_detections(dets, [gt(0, 0, 2, 2, 0, 0)])
        assert order == [1, 0]
        assert flags == [TP, FP]

    def test_picks_highest_iou_unmatched_gt(self):
        dets = [pl(0.2, 0, 2, 2, 0, 0, 0.9)]
        truths = [gt(0, 0, 2, 2, 0, 0), gt(0.3, 0, 2, 2, 0, 0)]
        _, flags = match_detections(dets, truths)
        assert flags == [TP]
        # second detection must match the other gt
        dets2 = dets + [pl(0.0, 0, 2, 2, 0, 0, 0.5)]
        _, flags2 = match_detections(dets2, truths)
        assert flags2 == [TP, TP]


class TestAveragePrecision:
    def test_all_tp_covering_all_gt(self):
        assert average_precision([0.9, 0.8], [TP, TP], num_gt=2) == 1.0

    def test_no_detections(self):
        assert average_precision([], [], num_gt=3) == 0.0

    def test_zero_gt_is_nan(self):
        assert math.isnan(average_precision([0.9], [FP], num_gt=0))

    def test_hand_computed_envelope_five_sixths(self):
        # precision envelope by hand: recall steps at p=1 then p=2/3
        ap = average_precision([0.9, 0.8, 0.7], [TP, FP, TP], num_gt=2)
        assert ap == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_ignored_entries_dropped(self):
        ap_with = average_precision([0.95, 0.9, 0.8, 0.7], [IGNORED, TP, FP, TP], num_gt=2)
        ap_without = average_precision([0.9, 0.8, 0.7], [TP, FP, TP], num_gt=2)
        assert ap_with == ap_without

    def test_score_order_not_input_order(self):
        ap = average_precision([0.7, 0.9, 0.8], [TP, TP, FP], num_gt=2)
        assert ap == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_invariant_to_monotone_score_transform(self):
        rng = np.random.default_rng(0)
        scores = list(rng.random(12))
        flags = [TP if v < 0.5 else FP for v in rng.random(12)]
        base = average_precision(scores, flags, num_gt=8)
        squashed = average_precision([s ** 3 + 2 for s in scores], flags, num_gt=8)
        assert base == pytest.approx(squashed, abs=1e-12)

    def test_trailing_fp_never_increases(self):
        scores = [0.9, 0.8]
        flags = [TP, TP]
        base = average_precision(scores, flags, num_gt=3)
        worse = average_precision(scores + [0.1], flags + [FP], num_gt=3)
        assert worse <= base

    def test_new_tp_never_decreases(self):
        scores = [0.9, 0.8]
        flags = [TP, FP]
        base = average_precision(scores, flags, num_gt=3)
        better = average_precision(scores + [0.1], flags + [TP], num_gt=3)
        assert better >= base

    def test_11_point_variant(self):
        ap = average_precision([0.9, 0.8, 0.7], [TP, FP, TP], num_gt=2, use_07_metric=True)
        # recall levels 0.0-0.5 see precision 1.0 (6 points), 0.6-1.0 see 2/3 (5 points)
        assert ap == pytest.approx((6 * 1.0 + 5 * (2.0 / 3.0)) / 11.0, abs=1e-12)


class TestEvaluate:
    def test_perfect_predictions(self):
        gts = [[gt(5, 5, 4, 2, 0.2, 0), gt(12, 12, 4, 4, -0.4, 1)]]
        dets = [[pl(5, 5, 4, 2, 0.2, 0, 0.9), pl(12, 12, 4, 4, -0.4, 1, 0.8)]]
        res = evaluate(dets, gts, num_classes=2)
        assert res.mean_ap == 1.0
        np.testing.assert_array_equal(res.per_class_ap, [1.0, 1.0])

    def test_empty_detections(self):
        gts = [[gt(5, 5, 4, 2, 0, 0)]]
        res = evaluate([[]], gts, num_classes=2)
        assert res.per_class_ap[0] == 0.0
        assert math.isnan(res.per_class_ap[1])
        assert res.mean_ap == 0.0

    def test_one_perfect_one_empty_class(self):
        gts = [[gt(5, 5, 4, 2, 0, 0), gt(12, 12, 4, 4, 0, 1)]]
        dets = [[pl(5, 5, 4, 2, 0, 0, 0.9)]]
        res = evaluate(dets, gts, num_classes=2)
        assert res.mean_ap == pytest.approx(0.5)

    def test_empty_dataset_undefined(self):
        res = evaluate([], [], num_classes=3)
        assert not res.defined
        assert math.isnan(res.mean_ap)

    def test_counts(self):
        gts = [[gt(5, 5, 4, 2, 0, 0)]]
        dets = [[pl(5, 5, 4, 2, 0, 0, 0.9), pl(50, 50, 4, 2, 0, 0, 0.3)]]
        res = evaluate(dets, gts, num_classes=1)
        c = res.counts[0]
        assert (c.gt, c.det, c.tp, c.fp) == (1, 2, 1, 1)

    def test_difficult_gt_not_in_denominator(self):
        gts = [[gt(5, 5, 4, 2, 0, 0), gt(20, 20, 4, 2, 0, 0, difficult=True)]]
        dets = [[pl(5, 5, 4, 2, 0, 0, 0.9)]]
        res = evaluate(dets, gts, num_classes=1)
        assert res.mean_ap == 1.0

    def test_matches_reference_oracle_on_random_micro_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(200):
            k = int(rng.integers(1, 4))
            n_gt = int(rng.integers(0, 4))
            n_det = int(rng.integers(0, 6))
            gts = []
            for _ in range(n_gt):
                gts.append(gt(rng.uniform(0, 10), rng.uniform(0, 10),
                              rng.uniform(1, 4), rng.uniform(1, 4),
                              rng.uniform(-1.5, 1.5), int(rng.integers(0, k))))
            dets = []
            for _ in range(n_det):
                if gts and rng.random() < 0.6:
                    # perturb an existing gt so IoUs straddle the threshold
                    base = gts[int(rng.integers(0, len(gts)))]
                    dets.append(pl(base.box.cx + rng.normal(0, 0.7), base.box.cy + rng.normal(0, 0.7),
                                   base.box.w, base.box.h, base.box.theta + rng.normal(0, 0.2),
                                   int(rng.integers(0, k)), float(rng.random())))
                else:
                    dets.append(pl(rng.uniform(0, 10), rng.uniform(0, 10),
                                   rng.uniform(1, 4), rng.uniform(1, 4),
                                   rng.uniform(-1.5, 1.5), int(rng.integers(0, k)),
                                   float(rng.random())))
            mine = evaluate([dets], [gts], num_classes=k)
            ref_dets = [[(d.box, d.class_id, d.score) for d in dets]]
            ref_gts = [[(g.box, g.class_id, g.difficult) for g in gts]]
            ref_aps, ref_map = reference_voc_eval(ref_dets, ref_gts, num_classes=k)
            np.testing.assert_allclose(mine.per_class_ap, ref_aps, atol=1e-9, equal_nan=True)
            if math.isnan(ref_map):
                assert math.isnan(mine.mean_ap)
            else:
                assert mine.mean_ap == pytest.approx(ref_map, abs=1e-9)


def fake_result(map_value):
    from sfodkit.evaluation import EvalResult
    return EvalResult(per_class_ap=np.array([map_value]), mean_ap=map_value)


class TestCorruptionTable:
    def test_single_kind_mean_is_identity(self):
        text, rows = corruption_table({"fog": fake_result(0.4)})
        assert rows == [("fog", 0.4), ("mean", 0.4)]
        assert "fog" in text and "mean" in text

    def test_two_kind_mean(self):
        _, rows = corruption_table({"fog": fake_result(0.4), "snow": fake_result(0.2)})
        assert rows[-1] == ("mean", pytest.approx(0.3))

    def test_canonical_order_and_stability(self):
        results = {k: fake_result(0.1) for k in ["cloudy", "fog", "gaussian_noise", "jpeg"]}
        _, rows = corruption_table(results)
        assert [r[0] for r in rows] == ["gaussian_noise", "fog", "jpeg", "cloudy", "mean"]
        _, rows2 = corruption_table(dict(reversed(list(results.items()))))
        assert rows == rows2

    def test_full_20_kind_table_has_21_numeric_columns(self):
        from sfodkit.evaluation import KIND_ORDER
        results = {k: fake_result(0.1 + 0.01 * i) for i, k in enumerate(KIND_ORDER)}
        text, rows = corruption_table(results)
        assert len(rows) == 21
        assert [r[0] for r in rows[:-1]] == KIND_ORDER

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            corruption_table({})

    def test_methods_table_renders_all_methods(self):
        res = {
            "direct": {"fog": fake_result(0.2)},
            "self_train": {"fog": fake_result(0.4)},
        }
        text = methods_table(res)
        assert "direct" in text and "self_train" in text and "fog" in text


class TestInterchangeFiles:
    def test_detection_round_trip(self, tmp_path):
        dets = [pl(5.5, 6.25, 4.0, 2.0, 0.3, 2, 0.875), pl(1, 2, 3, 4, -0.7, 0, 0.5)]
        path = tmp_path / "img0.txt"
        write_detections(path, dets)
        assert read_detections(path) == dets

    def test_ground_truth_round_trip(self, tmp_path):
        gts = [gt(5.5, 6.25, 4.0, 2.0, 0.3, 1), gt(1, 2, 3, 4, -0.7, 0, difficult=True)]
        path = tmp_path / "gt0.txt"
        write_ground_truth(path, gts)
        assert read_ground_truth(path) == gts

    def test_malformed_line_reports_location(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0 0.5 1 2\n")
        with pytest.raises(ValueError, match="bad.txt:1"):
            read_detections(path)
