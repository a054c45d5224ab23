import numpy as np
import pytest
import torch

from core.audit import audit
from core.exceptions import ConfigurationError, UndefinedCoverageError
from schemas.detector_model import Detection
from schemas.report_model import ApMode, FeatureStats
from schemas.scene_model import Annotation, BoundingBox, Domain
from schemas.scenario_presets import SIM2REAL
from services.metrics_services import (ap_from_curve, average_precision,
                                       coverage, evaluate, feature_stats,
                                       frechet_distance, match_detections)
from services.model_services import forward, pooled_features
from services.scenegen_services import generate_scene
from tests.conftest import write_samples
from utilis.image_helper import load_png
from utilis.manifest_helper import load_manifest

GT_BOX = BoundingBox(x_min=0, y_min=0, x_max=10, y_max=10)
# IoU 0.6 with GT_BOX.
NEAR_BOX = BoundingBox(x_min=0, y_min=0, x_max=10, y_max=6)
FAR_BOX = BoundingBox(x_min=20, y_min=20, x_max=30, y_max=30)


def _det(box: BoundingBox, score: float, class_id: int = 0) -> Detection:
    return Detection(box=box, class_id=class_id, objectness=score,
                     class_prob=1.0, score=score)


def _gt(box: BoundingBox, class_id: int = 0) -> Annotation:
    return Annotation(box=box, class_id=class_id)


def _random_box(rng) -> BoundingBox:
    x, y = rng.uniform(0, 20, size=2)
    w, h = rng.uniform(3, 12, size=2)
    return BoundingBox(x_min=x, y_min=y, x_max=x + w, y_max=y + h)


def _iou(a: BoundingBox, b: BoundingBox) -> float:
    w = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    h = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = w * h
    return inter / (a.area + b.area - inter) if inter else 0.0


def _brute_force_ap(detections: list[Detection], truths: list[BoundingBox],
                    mode: ApMode) -> float:
    """Precision and recall at every score cutoff, then the AP rule."""
    ranked = sorted(detections, key=lambda d: -d.score)
    matched = set()
    hits = []
    for detection in ranked:
        overlaps = [(_iou(detection.box, box), i)
                    for i, box in enumerate(truths) if i not in matched]
        best = max(overlaps, default=(0.0, None))
        if best[1] is not None and best[0] >= 0.5:
            matched.add(best[1])
            hits.append(True)
        else:
            hits.append(False)
    points = []
    for cutoff in range(1, len(hits) + 1):
        tp = sum(hits[:cutoff])
        points.append((tp / len(truths), tp / cutoff))
    if mode == ApMode.VOC11:
        return sum(max((p for r, p in points if r >= k / 10), default=0.0)
                   for k in range(11)) / 11
    total, previous = 0.0, 0.0
    for recall in sorted({r for r, _ in points}):
        best_precision = max(p for r, p in points if r >= recall)
        total += (recall - previous) * best_precision
        previous = recall
    return total


class TestAveragePrecision:
    def test_single_match(self):
        for mode in ApMode:
            result = average_precision([[_det(NEAR_BOX, 0.7)]],
                                       [[_gt(GT_BOX)]], mode=mode,
                                       num_classes=1)
            assert result.per_class[0] == 1.0
            assert result.mean_ap == 1.0

    def test_all_misses(self):
        result = average_precision([[_det(FAR_BOX, 0.9)]], [[_gt(GT_BOX)]],
                                   num_classes=1)
        assert result.mean_ap == 0.0

    def test_no_detections(self):
        result = average_precision([[]], [[_gt(GT_BOX)]], num_classes=1)
        assert result.mean_ap == 0.0

    def test_false_positive_ranked_first(self):
        detections = [[_det(FAR_BOX, 0.9), _det(GT_BOX, 0.8)]]
        for mode in ApMode:
            result = average_precision(detections, [[_gt(GT_BOX)]],
                                       mode=mode, num_classes=1)
            assert result.mean_ap == pytest.approx(0.5)

    def test_modes_diverge(self):
        # Two GT; ranked TP, FP, FP, TP.
        other = BoundingBox(x_min=40, y_min=40, x_max=50, y_max=50)
        detections = [[_det(GT_BOX, 0.9), _det(FAR_BOX, 0.8),
                       _det(FAR_BOX, 0.7), _det(other, 0.6)]]
        truths = [[_gt(GT_BOX), _gt(other)]]
        allpoint = average_precision(detections, truths, mode=ApMode.ALLPOINT,
                                     num_classes=1).mean_ap
        voc11 = average_precision(detections, truths, mode=ApMode.VOC11,
                                  num_classes=1).mean_ap
        assert allpoint == pytest.approx(0.75)
        assert voc11 == pytest.approx(8.5 / 11)
        assert abs(voc11 - allpoint) > 0.01

    def test_class_without_ground_truth_is_excluded(self):
        result = average_precision([[_det(GT_BOX, 0.9, class_id=0)]],
                                   [[_gt(GT_BOX, class_id=0)]])
        assert result.per_class == {0: 1.0, 1: None, 2: None}
        assert result.mean_ap == 1.0

    def test_each_ground_truth_matches_once(self):
        flags, gt_count = match_detections(
            [[_det(GT_BOX, 0.9), _det(GT_BOX, 0.8)]], [[_gt(GT_BOX)]], 0,
            0.5)
        assert flags == [True, False]
        assert gt_count == 1

    def test_equal_scores_follow_detection_order(self):
        flags, _ = match_detections(
            [[_det(FAR_BOX, 0.5), _det(GT_BOX, 0.5)]], [[_gt(GT_BOX)]], 0,
            0.5)
        assert flags == [False, True]

    def test_mismatched_image_counts(self):
        with pytest.raises(ConfigurationError):
            average_precision([[], []], [[]])

    def test_empty_curve(self):
        assert ap_from_curve([], 3, ApMode.ALLPOINT) == 0.0

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            truths = [_random_box(rng)
                      for _ in range(int(rng.integers(1, 4)))]
            detections = []
            for _ in range(int(rng.integers(0, 6))):
                if truths and rng.uniform() < 0.6:
                    base = truths[int(rng.integers(len(truths)))]
                    shift = rng.uniform(-3, 3, size=2)
                    box = BoundingBox(x_min=base.x_min + shift[0],
                                      y_min=base.y_min + shift[1],
                                      x_max=base.x_max + shift[0],
                                      y_max=base.y_max + shift[1])
                else:
                    box = _random_box(rng)
                detections.append(_det(box, float(rng.uniform())))
            for mode in ApMode:
                result = average_precision([detections],
                                           [[_gt(b) for b in truths]],
                                           mode=mode, num_classes=1)
                assert result.mean_ap == pytest.approx(
                    _brute_force_ap(detections, truths, mode), abs=1e-12)


class TestCoverage:
    @pytest.mark.parametrize("baseline, adapted, oracle, expected", [
        (39.40, 46.60, 58.60, 0.3750),
        (33.48, 47.31, 47.56, 0.9822),
        (38.20, 43.90, 55.80, 0.3239),
        (30.0, 30.0, 50.0, 0.0),
    ])
    def test_reported_values(self, baseline, adapted, oracle, expected):
        assert coverage(baseline, adapted, oracle) == pytest.approx(
            expected, abs=5e-5)

    def test_may_exceed_one(self):
        assert coverage(10.0, 30.0, 20.0) == pytest.approx(2.0)

    def test_equal_oracle_and_baseline(self):
        with pytest.raises(UndefinedCoverageError):
            coverage(40.0, 45.0, 40.0)

    def test_affine_invariance(self):
        values = (39.40, 46.60, 58.60)
        scaled = [2.5 * v + 3.0 for v in values]
        assert coverage(*scaled) == pytest.approx(coverage(*values),
                                                  abs=1e-12)


def _stats(mean, covariance, count=10) -> FeatureStats:
    return FeatureStats(mean=list(mean), covariance=np.asarray(
        covariance).tolist(), sample_count=count)


def _random_stats(rng, dim=4) -> FeatureStats:
    m = rng.normal(size=(dim, dim))
    return _stats(rng.normal(size=dim), m @ m.T)


class TestFrechetDistance:
    def test_identity(self):
        a = _random_stats(np.random.default_rng(0))
        assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)

    def test_mean_shift_with_identity_covariance(self):
        a = _stats([0.0, 0.0, 0.0], np.eye(3))
        b = _stats([1.0, 2.0, -2.0], np.eye(3))
        assert frechet_distance(a, b) == pytest.approx(9.0)

    def test_one_dimensional(self):
        a = _stats([0.0], [[4.0]])
        b = _stats([0.0], [[1.0]])
        assert frechet_distance(a, b) == pytest.approx(1.0)

    def test_symmetric_and_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = _random_stats(rng), _random_stats(rng)
            forward_distance = frechet_distance(a, b)
            assert forward_distance >= 0.0
            assert forward_distance == pytest.approx(
                frechet_distance(b, a), abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            frechet_distance(_stats([0.0], [[1.0]]),
                             _stats([0.0, 0.0], np.eye(2)))

    def test_rejects_asymmetric_covariance(self):
        with pytest.raises(ValueError):
            _stats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


class TestFeatureStats:
    def test_identical_images_have_zero_covariance(self, tmp_path,
                                                   small_detector,
                                                   source_sample):
        path = write_samples([source_sample] * 4, tmp_path, "same")
        stats = feature_stats(small_detector,
                              load_manifest(path, include_annotations=False))
        assert np.all(stats.cov_array() == 0.0)
        assert stats.sample_count == 4

    def test_order_does_not_matter(self, tmp_path, small_detector):
        samples = [generate_scene(seed, SIM2REAL.source, (32, 32), (1, 2))
                   for seed in range(5)]
        forward_path = write_samples(samples, tmp_path, "forward")
        backward_path = write_samples(samples[::-1], tmp_path, "backward")
        a = feature_stats(small_detector,
                          load_manifest(forward_path, False))
        b = feature_stats(small_detector,
                          load_manifest(backward_path, False))
        assert np.allclose(a.mean_array(), b.mean_array(), atol=1e-12)
        assert np.allclose(a.cov_array(), b.cov_array(), atol=1e-12)

    def test_mean_matches_second_pass(self, tmp_path, small_detector):
        samples = [generate_scene(seed, SIM2REAL.source, (32, 32), (1, 2))
                   for seed in range(20)]
        manifest = load_manifest(write_samples(samples, tmp_path, "twenty"),
                                 False)
        stats = feature_stats(small_detector, manifest)
        total = None
        with torch.no_grad():
            for record in manifest.images:
                features, _ = forward(small_detector,
                                      load_png(manifest.image_path(record)))
                row = pooled_features(features)[0].double().numpy()
                total = row if total is None else total + row
        assert np.allclose(stats.mean_array(), total / 20, atol=1e-6)

    def test_single_image(self, tmp_path, small_detector, source_sample):
        path = write_samples([source_sample], tmp_path, "one")
        stats = feature_stats(small_detector, load_manifest(path, False))
        assert np.all(stats.cov_array() == 0.0)


class TestEvaluate:
    def test_report_and_audit(self, small_detector, scene_manifests):
        report = evaluate(small_detector, scene_manifests["val"])
        assert set(report.map50) == {ApMode.VOC11, ApMode.ALLPOINT}
        assert report.gt_count == sum(report.gt_per_class.values()) > 0
        assert report.detection_count <= 3 * 100
        assert report.metadata["images"] == 3
        events = audit.events("evaluator")
        assert events and all(e.annotations_read for e in events)
        assert audit.ground_truth_leaks() == []

    def test_metadata_is_merged(self, small_detector, scene_manifests):
        report = evaluate(small_detector, scene_manifests["val"],
                          modes=(ApMode.ALLPOINT,),
                          metadata={"checkpoint": "ckpt_5.json"})
        assert report.metadata["checkpoint"] == "ckpt_5.json"
        assert list(report.map50) == [ApMode.ALLPOINT]

    def test_target_domain_is_recorded(self, small_detector,
                                       scene_manifests):
        evaluate(small_detector, scene_manifests["val"])
        event = audit.events("evaluator")[0]
        assert Domain.TARGET.value in event.ground_truth_domains
