""" Tests for detection and region description metrics """
import numpy as np
import pytest

from groundgenie.const import MODE_SCORED, MODE_UNSCORED
from groundgenie.exceptions import GroundgenieError
from groundgenie.geometry import Box
from groundgenie.io_formats import predictions_to_detection_set, read_coco_ground_truth, read_predictions
from groundgenie.metrics import *


def _gt(*boxes, cat=1, ignore=False):
    return [GroundTruth(Box(*b), cat, ignore) for b in boxes]


def _dets(*items, cat=1):
    return [Detection(Box(*b), cat, s) for b, s in items]


@pytest.fixture
def bundle(gt_path):
    return read_coco_ground_truth(gt_path)


class TestSets:
    def test_unknown_category(self):
        with pytest.raises(GroundgenieError):
            GroundTruthSet({"a": _gt((0, 0, 1, 1), cat=9)}, [Category(1, "one")])

    def test_categories_derived(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1), cat=4)})
        assert list(gts.categories) == [4]
        assert gts.num_positives() == 1 and gts.num_positives(5) == 0

    def test_ignored_not_positive(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1)) + _gt((2, 2, 3, 3), ignore=True)})
        assert gts.num_positives() == 1

    def test_mixed_scores_rejected(self):
        with pytest.raises(GroundgenieError):
            DetectionSet({"a": _dets(((0, 0, 1, 1), 0.5), ((0, 0, 1, 1), None))})

    @pytest.mark.parametrize("score", [-0.1, 1.5])
    def test_score_range(self, score):
        with pytest.raises(GroundgenieError):
            DetectionSet({"a": _dets(((0, 0, 1, 1), score))})

    def test_mode(self):
        assert DetectionSet({"a": _dets(((0, 0, 1, 1), 0.5))}).mode == MODE_SCORED
        assert DetectionSet({"a": _dets(((0, 0, 1, 1), None))}).mode == MODE_UNSCORED
        assert DetectionSet().mode == MODE_UNSCORED


class TestMatching:
    def test_confidence_order(self):
        gts = _gt((0, 0, 10, 10))
        dets = _dets(((0, 0, 10, 9), 0.3), ((0, 0, 10, 8), 0.9))
        m = match_detections(dets, gts)
        assert m.labels == ["fp", "tp"]
        assert m.gt_match == [1]
        assert (m.tp, m.fp, m.fn) == (1, 1, 0)

    def test_unscored_uses_given_order(self):
        m = match_detections(_dets(((0, 0, 10, 9), None), ((0, 0, 10, 10), None)), _gt((0, 0, 10, 10)))
        assert m.labels == ["tp", "fp"]

    def test_best_iou_wins(self):
        gts = _gt((0, 0, 10, 10), (1, 0, 11, 10))
        m = match_detections(_dets(((1, 0, 11, 10), None)), gts)
        assert m.gt_match == [-1, 0]

    def test_threshold_inclusive(self):
        # IoU exactly 0.5
        m = match_detections(_dets(((0, 0, 10, 10), None)), _gt((0, 0, 10, 20)), 0.5)
        assert m.tp == 1

    def test_class_must_agree(self):
        m = match_detections([Detection(Box(0, 0, 1, 1), 2)], _gt((0, 0, 1, 1), cat=1))
        assert (m.tp, m.fp, m.fn) == (0, 1, 1)

    def test_ignored_ground_truth(self):
        gts = _gt((0, 0, 10, 10), ignore=True)
        m = match_detections(_dets(((0, 0, 10, 10), None)), gts)
        assert m.labels == ["ignored"]
        assert (m.tp, m.fp, m.fn) == (0, 0, 0)


class TestPrecisionRecall:
    def test_counted_fixture(self, bundle, unscored_preds_path):
        records = read_predictions(unscored_preds_path, categories=bundle.category_by_name())
        pr = precision_recall_at(predictions_to_detection_set(records), bundle.to_ground_truth())
        assert (pr.tp, pr.fp, pr.fn) == (7, 3, 3)
        assert pr.precision == pytest.approx(0.7, abs=1e-9)
        assert pr.recall == pytest.approx(0.7, abs=1e-9)

    def test_per_image_aggregation(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1)), "b": _gt((0, 0, 1, 1), (5, 5, 6, 6))})
        dets = DetectionSet({"a": _dets(((0, 0, 1, 1), None)), "b": _dets(((0, 0, 1, 1), None))})
        glob = precision_recall_at(dets, gts, aggregate=GLOBAL)
        per = precision_recall_at(dets, gts, aggregate=PER_IMAGE)
        assert glob.recall == pytest.approx(2.0 / 3)
        assert per.recall == pytest.approx(0.75)
        with pytest.raises(GroundgenieError):
            precision_recall_at(dets, gts, aggregate="median")

    def test_empty_cases(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1))})
        nothing = precision_recall_at(DetectionSet(), gts)
        assert (nothing.precision, nothing.recall) == (0.0, 0.0)
        empty = precision_recall_at(DetectionSet(), GroundTruthSet({"a": []}, [Category(1, "x")]))
        assert (empty.precision, empty.recall) == (1.0, 1.0)

    def test_detections_on_unannotated_image_are_false_positives(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1))})
        dets = DetectionSet({"a": _dets(((0, 0, 1, 1), None)), "z": _dets(((0, 0, 1, 1), None))})
        assert precision_recall_at(dets, gts).fp == 1

    def test_jobs_do_not_change_results(self):
        rng = np.random.default_rng(5)
        images, det_images = {}, {}
        for k in range(20):
            xy = rng.uniform(0, 100, (6, 2))
            images[k] = [GroundTruth(Box(x, y, x + 10, y + 10), 1) for x, y in xy]
            det_images[k] = [Detection(Box(x + 1, y, x + 11, y + 10), 1) for x, y in xy[:4]]
        gts, dets = GroundTruthSet(images), DetectionSet(det_images)
        assert precision_recall_at(dets, gts, jobs=1) == precision_recall_at(dets, gts, jobs=4)


class TestAveragePrecision:
    def test_ground_truth_against_itself(self, bundle):
        gts = bundle.to_ground_truth()
        dets = DetectionSet({i: [Detection(g.box, g.category_id, 1.0) for g in v] for i, v in gts.images.items()})
        ap = average_precision(dets, gts)
        assert ap.map == 1.0
        assert set(ap.per_class) == {1, 2}
        assert all(v == 1.0 for v in ap.per_threshold.values())

    def test_hand_computed_ranking(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10))})
        dets = DetectionSet({"a": _dets(((0, 0, 10, 10), 0.9), ((70, 70, 80, 80), 0.8),
                                        ((20, 0, 30, 10), 0.7))})
        # recall 1/3 at precision 1 for 34 points, then 2/3 at 2/3 for 33 points
        assert average_precision(dets, gts).map == pytest.approx((34 + 33 * 2.0 / 3) / 101)

    def test_no_detections(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1))})
        assert average_precision(DetectionSet(), gts).map == 0.0

    def test_frequency_buckets(self, bundle, scored_preds_path):
        dets = predictions_to_detection_set(read_predictions(scored_preds_path))
        report = evaluate(dets, bundle.to_ground_truth())
        assert report.mode == MODE_SCORED
        assert report.ap.per_class[1] > report.ap.per_class[2]
        assert report.frequency.frequent == pytest.approx(report.ap.per_class[1])
        assert report.frequency.common == pytest.approx(report.ap.per_class[2])
        assert report.frequency.rare is None

    def test_frequency_ap_direct(self):
        cats = {1: Category(1, "a", "rare"), 2: Category(2, "b", "rare"), 3: Category(3, "c")}
        f = frequency_ap({1: 0.2, 2: 0.4, 3: 1.0}, cats)
        assert f.rare == pytest.approx(0.3)
        assert f.common is None and f.frequent is None


class TestEvaluate:
    def test_unscored_report(self, bundle, unscored_preds_path):
        records = read_predictions(unscored_preds_path, categories=bundle.category_by_name())
        report = evaluate(predictions_to_detection_set(records), bundle.to_ground_truth(),
                          iou_thresholds=[0.5, 0.75])
        assert report.mode == MODE_UNSCORED
        assert report.ap is None and report.map is None
        assert list(report.precision_recall) == [0.5, 0.75]
        d = report.to_dict()
        assert d["precision_recall"]["0.50"]["precision"] == pytest.approx(0.7)
        text = report.render()
        assert "P@0.50: 0.7000  R@0.50: 0.7000" in text
        assert "mAP" not in text

    def test_scored_mode_needs_scores(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1))})
        with pytest.raises(GroundgenieError):
            evaluate(DetectionSet({"a": _dets(((0, 0, 1, 1), None))}), gts, MODE_SCORED)

    def test_warnings(self):
        gts = GroundTruthSet({"a": _gt((0, 0, 1, 1))})
        dets = DetectionSet({"b": [Detection(Box(0, 0, 1, 1), 7)]})
        report = evaluate(dets, gts)
        assert len(report.warnings) == 2


class TestRegionText:
    @pytest.mark.parametrize(["pred", "strict", "hit"], [
        (Box(0, 0, 10, 10), True, True),
        (Box(0, 0, 10, 20), True, False),
        (Box(0, 0, 10, 20), False, True),
        (None, True, False),
    ])
    def test_referring_accuracy(self, pred, strict, hit):
        assert referring_accuracy(pred, Box(0, 0, 10, 10), strict=strict) is hit

    def test_referring_rate(self):
        gt = Box(0, 0, 10, 10)
        assert referring_accuracy_rate([(gt, gt), (None, gt)]) == 0.5
        assert referring_accuracy_rate([]) == 0.0

    @pytest.mark.parametrize(["pred", "gt", "expected"], [
        ("A red car.", "a red car", 1.0),
        ("red car", "blue car", 1.0 / 3),
        ("", "", 1.0),
        ("", "car", 0.0),
    ])
    def test_semantic_iou(self, pred, gt, expected):
        assert semantic_iou(pred, gt) == pytest.approx(expected)

    def test_semantic_similarity(self):
        assert semantic_similarity("the red car", "The red car!") == pytest.approx(1.0)
        assert semantic_similarity("", "") == 1.0
        assert semantic_similarity("", "car") == 0.5
        assert 0.0 <= semantic_similarity("a dog", "the cat") <= 1.0

    @pytest.mark.parametrize("text", ["a red car", "the tall man on the left side", "dog", "\u00e9t\u00e9 \u4e2d"])
    def test_identical_strings_score_exactly_one(self, text):
        assert semantic_similarity(text, text) == 1.0

    def test_parallel_embeddings_score_exactly_one(self):
        embed = lambda t: np.array([0.1, 0.7, 0.3]) * (3.0 if t == "long" else 1.0)
        assert semantic_similarity("long", "short", embed) == 1.0

    def test_custom_embedder(self):
        embed = lambda t: np.array([1.0, 0.0]) if "up" in t else np.array([-1.0, 0.0])
        assert semantic_similarity("up", "down", embed) == pytest.approx(0.0)

    def test_region_caption_scores(self):
        s = region_caption_scores([("a red car", "a red car"), ("red car", "blue car")])
        assert s.count == 2
        assert s.s_iou == pytest.approx((1.0 + 1.0 / 3) / 2)
        assert region_caption_scores([]) == (None, None, 0)
