import numpy as np
import pytest

from scenemoe import metrics as mt
from scenemoe.errors import ConfigError, DataError
from scenemoe.interchange import (
    GROUND_TRUTH,
    InterchangeFile,
    InterchangeHeader,
    IntervalRecord,
    PREDICTIONS,
)


def P(vid, s, e, cls, conf):
    return mt.PredInterval(vid, float(s), float(e), cls, conf)


def G(vid, s, e, cls):
    return mt.TrueInterval(vid, float(s), float(e), cls)


class TestAccuracy:
    def test_identical(self):
        assert mt.accuracy(list("aabbc"), list("aabbc")) == 1.0

    def test_disjoint(self):
        assert mt.accuracy(list("aaa"), list("bbb")) == 0.0

    def test_seven_of_ten(self):
        pred = ["x"] * 7 + ["y"] * 3
        true = ["x"] * 10
        assert mt.accuracy(pred, true) == 0.7

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            mt.accuracy(["a"], ["a", "b"])


class TestF2:
    def test_hand_case(self):
        # precision 0.5, recall 1.0 -> 5*0.5*1 / (4*0.5 + 1) = 0.83333
        pred = [True, True, True, True]
        true = [True, True, False, False]
        assert abs(mt.f2_score(pred, true) - 0.83333) < 1e-5

    def test_perfect(self):
        assert mt.f2_score([True, False, True], [True, False, True]) == 1.0

    def test_no_positive_predictions(self):
        assert mt.f2_score([False, False], [True, True]) == 0.0

    def test_identity_against_confusion_counts(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = list(rng.random(30) < 0.5)
            true = list(rng.random(30) < 0.4)
            tp = sum(p and t for p, t in zip(pred, true))
            fp = sum(p and not t for p, t in zip(pred, true))
            fn = sum(t and not p for p, t in zip(pred, true))
            if tp == 0:
                assert mt.f2_score(pred, true) == 0.0
                continue
            precision, recall = tp / (tp + fp), tp / (tp + fn)
            want = 5 * precision * recall / (4 * precision + recall)
            assert abs(mt.f2_score(pred, true) - want) < 1e-12


class TestFnr:
    def test_three_of_ten(self):
        true = [True] * 10 + [False] * 5
        pred = [True] * 7 + [False] * 3 + [False] * 5
        assert mt.fnr(pred, true) == 0.30

    def test_all_caught(self):
        assert mt.fnr([True, True], [True, True]) == 0.0

    def test_all_missed(self):
        assert mt.fnr([False, False], [True, True]) == 1.0

    def test_no_positives_is_not_applicable(self):
        assert mt.fnr([False, True], [False, False]) is None


class TestIntervalIoU:
    def test_hand_case(self):
        assert abs(mt.interval_iou((0, 10), (5, 15)) - 1 / 3) < 1e-5

    def test_identical(self):
        assert mt.interval_iou((2, 8), (2, 8)) == 1.0

    def test_small_overlap(self):
        assert abs(mt.interval_iou((0, 10), (9, 20)) - 0.05) < 1e-12

    def test_disjoint(self):
        assert mt.interval_iou((0, 1), (2, 3)) == 0.0


class TestMapAtIoU:
    def test_single_exact_match(self):
        res = mt.map_at_iou([P("v", 0, 10, "a", 0.9)], [G("v", 0, 10, "a")])
        assert all(v == 1.0 for v in res.per_threshold.values())
        assert res.avg == 1.0

    def test_miss_then_hit_gives_half(self):
        preds = [P("v", 50, 60, "a", 0.9), P("v", 0, 10, "a", 0.8)]
        gts = [G("v", 0, 10, "a")]
        res = mt.map_at_iou(preds, gts)
        for thr in mt.IOU_THRESHOLDS:
            assert res.per_threshold[thr] == 0.5
            assert abs(mt.ap_bruteforce(preds, gts, thr) - 0.5) < 1e-15

    def test_monotone_non_increasing_in_threshold(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            preds, gts = random_instance(rng)
            res = mt.map_at_iou(preds, gts, thresholds=(0.1, 0.2, 0.3, 0.5, 0.7))
            vals = [res.per_threshold[t] for t in (0.1, 0.2, 0.3, 0.5, 0.7)]
            assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_empty_ground_truth_class_excluded(self):
        preds = [P("v", 0, 10, "a", 0.9), P("v", 0, 10, "b", 0.8)]
        gts = [G("v", 0, 10, "a")]
        res = mt.map_at_iou(preds, gts)
        assert set(res.per_class) == {"a"}


def random_instance(rng, max_gt=6, max_pred=8, classes=("a", "b", "c"), videos=("u", "v")):
    gts, preds = [], []
    for _ in range(int(rng.integers(1, max_gt + 1))):
        start = float(rng.integers(0, 30))
        gts.append(G(str(rng.choice(videos)), start, start + float(rng.integers(1, 10)), str(rng.choice(classes))))
    confs = rng.permutation(np.linspace(0.1, 0.9, max_pred))
    for i in range(int(rng.integers(0, max_pred + 1))):
        start = float(rng.integers(0, 30))
        preds.append(
            P(str(rng.choice(videos)), start, start + float(rng.integers(1, 10)), str(rng.choice(classes)), float(confs[i]))
        )
    return preds, gts


class TestBruteForceOracle:
    def test_refuses_large_instances(self):
        preds = [P("v", i, i + 1, "a", 0.5) for i in range(9)]
        with pytest.raises(ConfigError):
            mt.ap_bruteforce(preds, [G("v", 0, 1, "a")], 0.1)

    def test_empty_predictions(self):
        assert mt.ap_bruteforce([], [G("v", 0, 1, "a")], 0.1) == 0.0

    def test_predictions_equal_gt(self):
        gts = [G("v", 0, 5, "a"), G("v", 10, 15, "a"), G("u", 2, 4, "b")]
        preds = [
            P("v", 0, 5, "a", 0.9),
            P("v", 10, 15, "a", 0.7),
            P("u", 2, 4, "b", 0.5),
        ]
        assert mt.ap_bruteforce(preds, gts, 0.3) == 1.0

    def test_agreement_campaign_200_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            preds, gts = random_instance(rng)
            res = mt.map_at_iou(preds, gts)
            for thr in mt.IOU_THRESHOLDS:
                assert res.per_threshold[thr] == mt.ap_bruteforce(preds, gts, thr)


class TestSemR:
    def test_identical(self):
        assert mt.sem_r("a b c", "a b c") == 1.0

    def test_worked_example(self):
        got = mt.sem_r("car hits pedestrians", "the car speeds and hits pedestrians")
        assert abs(got - 0.66667) < 1e-5

    def test_disjoint(self):
        assert mt.sem_r("x y", "a b") == 0.0

    def test_empty_reference(self):
        assert mt.sem_r("a", "") is None

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        words = list("abcdefg")
        for _ in range(50):
            a = " ".join(rng.choice(words, size=rng.integers(1, 6)))
            b = " ".join(rng.choice(words, size=rng.integers(1, 6)))
            assert abs(mt.sem_r(a, b) - mt.sem_r(b, a)) < 1e-12


class TestSemC:
    def test_identical(self):
        assert abs(mt.sem_c("a b", "a b") - 1.0) < 1e-12

    def test_disjoint(self):
        assert mt.sem_c("a b", "c d") == 0.0

    def test_half(self):
        assert mt.sem_c("a b", "a c") == 0.5

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        words = list("abcde")
        for _ in range(50):
            a = " ".join(rng.choice(words, size=rng.integers(1, 6)))
            b = " ".join(rng.choice(words, size=rng.integers(1, 6)))
            assert abs(mt.sem_c(a, b) - mt.sem_c(b, a)) < 1e-12


class TestSenA:
    def test_all_correct(self):
        gts = [G("v", 0, 5, "a")]
        claims = [(P("v", 0, 5, "a", 0.9), "a")]
        assert mt.sen_a(claims, gts) == 1.0

    def test_all_wrong(self):
        gts = [G("v", 0, 5, "a")]
        claims = [(P("v", 0, 5, "a", 0.9), "b")]
        assert mt.sen_a(claims, gts) == 0.0

    def test_three_of_four(self):
        gts = [G("v", 0, 4, "a"), G("v", 10, 14, "b")]
        claims = [
            (P("v", 0, 4, "a", 0.9), "a"),
            (P("v", 1, 4, "a", 0.8), "a"),
            (P("v", 10, 13, "b", 0.7), "b"),
            (P("v", 11, 14, "b", 0.6), "a"),
        ]
        assert mt.sen_a(claims, gts) == 0.75

    def test_no_claims_not_applicable(self):
        assert mt.sen_a([], [G("v", 0, 5, "a")]) is None


def make_files(gt_records, pred_records, videos, classes=("bg", "a", "b"), ss=1.0):
    gt_header = InterchangeHeader(GROUND_TRUTH, ss, "bg", list(classes), dict(videos))
    pred_header = InterchangeHeader(PREDICTIONS, ss, "bg", list(classes), dict(videos))
    return (
        InterchangeFile(pred_header, pred_records),
        InterchangeFile(gt_header, gt_records),
    )


def rec(vid, s, e, cls, text="t", claim=None, conf=None, atr=None):
    return IntervalRecord(vid, float(s), float(e), cls, text, claim or cls, conf, atr)


class TestEvaluate:
    def test_perfect_predictions(self):
        gt = [rec("v", 1, 3, "a"), rec("w", 0, 2, "b")]
        pred = [rec("v", 1, 3, "a", conf=0.9), rec("w", 0, 2, "b", conf=0.8)]
        preds, gts = make_files(gt, pred, {"v": 5, "w": 4})
        report = mt.evaluate(preds, gts)
        assert report.acc == 1.0
        assert report.f2 == 1.0
        assert report.fnr == 0.0
        assert report.map_avg == 1.0
        assert report.sem_r == 1.0 and report.sem_c == 1.0 and report.sen_a == 1.0
        assert report.atr_r is None

    def test_empty_predictions_nonempty_gt(self):
        gt = [rec("v", 1, 3, "a")]
        preds, gts = make_files(gt, [], {"v": 5})
        report = mt.evaluate(preds, gts)
        assert report.fnr == 1.0
        assert report.map_avg == 0.0
        assert report.f2 == 0.0
        assert report.sen_a is None

    def test_video_permutation_invariance(self):
        gt = [rec("v", 1, 3, "a"), rec("w", 0, 2, "b"), rec("u", 2, 4, "a")]
        pred = [rec("w", 0, 1, "b", conf=0.7), rec("v", 1, 2, "a", conf=0.9), rec("u", 0, 4, "a", conf=0.4)]
        videos = {"v": 5, "w": 4, "u": 6}
        preds, gts = make_files(gt, pred, videos)
        base = mt.evaluate(preds, gts)
        preds2, gts2 = make_files(list(reversed(gt)), list(reversed(pred)), videos)
        flipped = mt.evaluate(preds2, gts2)
        assert base.acc == flipped.acc
        assert base.f2 == flipped.f2
        assert base.map_by_threshold == flipped.map_by_threshold
        assert base.sem_c == flipped.sem_c

    def test_video_map_mismatch_rejected(self):
        gt = [rec("v", 1, 3, "a")]
        preds, gts = make_files(gt, [], {"v": 5})
        preds.header.videos = {"v": 6}
        with pytest.raises(DataError):
            mt.evaluate(preds, gts)

    def test_imported_atr_scores_are_averaged(self):
        gt = [rec("v", 1, 3, "a")]
        pred = [rec("v", 1, 3, "a", conf=0.9, atr=0.5)]
        preds, gts = make_files(gt, pred, {"v": 5})
        assert mt.evaluate(preds, gts).atr_r == 0.5

    def test_all_outputs_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            videos = {"v": 8, "w": 8}
            gt, pred = [], []
            for vid in videos:
                t = 0
                while t < 6:
                    cls = str(rng.choice(["a", "b"]))
                    ln = int(rng.integers(1, 3))
                    if rng.random() < 0.6:
                        gt.append(rec(vid, t, t + ln, cls, text="p q r"))
                    if rng.random() < 0.6:
                        pred.append(rec(vid, t, t + ln, cls, text="p q", conf=float(rng.random())))
                    t += ln + int(rng.integers(1, 3))
            preds, gts = make_files(gt, pred, videos)
            report = mt.evaluate(preds, gts)
            for value in [report.acc, report.f2, report.fnr, report.map_avg, report.sem_r, report.sem_c, report.sen_a]:
                if value is not None:
                    assert -1e-12 <= value <= 1.0 + 1e-12

    def test_report_rendering_deterministic(self):
        gt = [rec("v", 1, 3, "a")]
        pred = [rec("v", 1, 2, "a", conf=0.9)]
        preds, gts = make_files(gt, pred, {"v": 5})
        r1 = mt.render_report_text(mt.evaluate(preds, gts))
        r2 = mt.render_report_text(mt.evaluate(preds, gts))
        assert r1 == r2
        assert "map@0.1" in r1 and "per-class" in r1
        tsv = mt.render_metrics_tsv(mt.evaluate(preds, gts))
        assert tsv.startswith("metric\tvalue\n")
