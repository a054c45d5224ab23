import math

import numpy as np
import pytest
import torch

from core.audit import audit
from core.exceptions import ConfigurationError, DataError
from schemas.detector_model import Detection, LabelMode, PseudoLabelConfig
from schemas.scene_model import Annotation, BoundingBox, Provenance
from services.model_services import (RawPrediction, SoftLabelParams,
                                     detection_loss)
from services.pseudolabel_services import (build_student_dataset,
                                           candidate_detections,
                                           generate_pseudo_labels,
                                           mixed_classification_loss,
                                           select_pseudo_labels,
                                           soft_distribution,
                                           sweep_thresholds)
from utilis.manifest_helper import load_manifest, read_json


def _detection(objectness: float, class_id: int = 0) -> Detection:
    return Detection(
        box=BoundingBox(x_min=1, y_min=1, x_max=9, y_max=9),
        class_id=class_id, objectness=objectness, class_prob=0.5,
        score=objectness * 0.5, class_logits=[2.0, 0.5, -1.0])


class TestSoftDistribution:
    def test_equal_logits_are_uniform(self):
        assert np.allclose(soft_distribution([0.0, 0.0], 1.0), [0.5, 0.5])

    def test_known_ratio(self):
        assert np.allclose(soft_distribution([math.log(4.0), 0.0], 1.0),
                           [0.8, 0.2])

    def test_high_temperature_flattens(self):
        result = soft_distribution([5.0, -3.0, 1.0], 1e6)
        assert np.allclose(result, 1 / 3, atol=1e-5)

    def test_large_logits_do_not_overflow(self):
        result = soft_distribution([1000.0, 0.0], 1.0)
        assert np.all(np.isfinite(result))
        assert result[0] == pytest.approx(1.0)

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(ConfigurationError):
            soft_distribution([1.0, 2.0], 0.0)


class TestMixedClassificationLoss:
    def test_half_mix(self):
        loss = mixed_classification_loss([0.8, 0.2], [1, 0], [0.8, 0.2], 0.5)
        assert loss == pytest.approx(0.36177, abs=1e-5)

    def test_hard_label_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = rng.dirichlet(np.ones(3))
            true_class = int(rng.integers(3))
            p = np.eye(3)[true_class]
            p_hat = rng.dirichlet(np.ones(3))
            assert (mixed_classification_loss(q, p, p_hat, 1.0)
                    == -np.log(q[true_class]))

    def test_equal_targets_ignore_alpha(self):
        p = [0.0, 1.0, 0.0]
        q = [0.2, 0.5, 0.3]
        losses = {round(mixed_classification_loss(q, p, p, alpha), 12)
                  for alpha in (0.0, 0.3, 1.0)}
        assert len(losses) == 1

    def test_rejects_alpha_out_of_range(self):
        with pytest.raises(ConfigurationError):
            mixed_classification_loss([0.5, 0.5], [1, 0], [0.5, 0.5], 1.2)

    def test_soft_target_with_unit_alpha_matches_hard_loss(self):
        pred = RawPrediction(
            objectness_logits=torch.zeros((1, 1, 1), dtype=torch.float64),
            class_logits=torch.tensor([[[[0.3]], [[1.1]], [[-0.4]]]],
                                      dtype=torch.float64),
            box_deltas=torch.zeros((1, 4, 1, 1), dtype=torch.float64),
            stride=8, image_size=(8, 8))
        annotation = Annotation(
            box=BoundingBox(x_min=1, y_min=1, x_max=7, y_max=7), class_id=1,
            provenance=Provenance.PSEUDO, score=0.9,
            class_logits=[0.1, 3.0, -2.0])
        hard = detection_loss(pred, [annotation])
        soft = detection_loss(pred, [annotation], SoftLabelParams(1e6, 1.0))
        assert float(soft.classification) == pytest.approx(
            float(hard.classification), abs=1e-12)


class TestPseudoLabelConfig:
    def test_alpha_defaults_by_mode(self):
        assert PseudoLabelConfig().alpha == 1.0
        assert PseudoLabelConfig(label_mode=LabelMode.SOFT).alpha == 0.5


class TestSelectPseudoLabels:
    def test_threshold_is_inclusive(self):
        candidates = [[_detection(0.5), _detection(0.49999), _detection(0.9)]]
        kept = select_pseudo_labels(candidates, PseudoLabelConfig(tau=0.5))
        assert [a.score for a in kept[0]] == [0.5, 0.9]
        assert all(a.provenance == Provenance.PSEUDO for a in kept[0])

    def test_hard_mode_drops_logits(self):
        kept = select_pseudo_labels([[_detection(0.8)]], PseudoLabelConfig())
        assert kept[0][0].class_logits is None

    def test_soft_mode_keeps_logits(self):
        config = PseudoLabelConfig(label_mode=LabelMode.SOFT)
        kept = select_pseudo_labels([[_detection(0.8)]], config)
        assert kept[0][0].class_logits == [2.0, 0.5, -1.0]

    def test_score_source(self):
        config = PseudoLabelConfig(tau=0.3, score_source="score")
        kept = select_pseudo_labels([[_detection(0.8), _detection(0.4)]],
                                    config)
        assert [a.score for a in kept[0]] == [0.4]

    def test_images_without_detections(self):
        assert select_pseudo_labels([[], []], PseudoLabelConfig()) == [[], []]


class TestGeneratePseudoLabels:
    def test_candidates_are_suppressed_and_capped(self, small_detector,
                                                  scene_manifests):
        target = load_manifest(scene_manifests["target"],
                               include_annotations=False)
        config = PseudoLabelConfig(max_detections=5)
        candidates = candidate_detections(small_detector, target, config)
        assert len(candidates) == len(target.images)
        assert all(len(c) <= 5 for c in candidates)

    def test_source_images_are_rejected(self, small_detector,
                                        scene_manifests):
        source = load_manifest(scene_manifests["source"],
                               include_annotations=False)
        with pytest.raises(DataError):
            candidate_detections(small_detector, source,
                                 PseudoLabelConfig())

    def test_manifest_and_sidecar(self, tmp_path, small_detector,
                                  scene_manifests):
        with audit.consumer("pseudolabel"):
            target = load_manifest(scene_manifests["target"],
                                   include_annotations=False)
            pseudo = generate_pseudo_labels(
                small_detector, target, PseudoLabelConfig(tau=0.0),
                tmp_path / "pseudo", "abc123")
        assert audit.ground_truth_leaks() == []
        assert len(pseudo.images) == len(target.images)
        assert all(a.provenance == Provenance.PSEUDO
                   for a in pseudo.annotations)
        sidecar = read_json(tmp_path / "pseudo" / "pseudo.sidecar.json")
        assert sidecar["tau"] == 0.0
        assert sidecar["label_mode"] == "hard"
        assert sidecar["teacher_checkpoint_hash"] == "abc123"
        assert sidecar["kept_count"] == len(pseudo.annotations)
        assert sidecar["kept_count"] == sidecar["total_count"]
        reloaded = load_manifest(tmp_path / "pseudo" / "pseudo.json",
                                 include_annotations=True)
        assert reloaded.image_path(reloaded.images[0]).exists()

    def test_sweep_is_monotone(self, small_detector, scene_manifests):
        target = load_manifest(scene_manifests["target"],
                               include_annotations=False)
        taus = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0]
        counts = sweep_thresholds(small_detector, target,
                                  PseudoLabelConfig(), taus)
        values = [counts[tau] for tau in taus]
        assert values == sorted(values, reverse=True)
        assert values[0] > 0


class TestBuildStudentDataset:
    def test_joins_ground_truth_and_pseudo(self, tmp_path, small_detector,
                                           scene_manifests):
        translated = load_manifest(scene_manifests["source"],
                                   include_annotations=True)
        target = load_manifest(scene_manifests["target"],
                               include_annotations=False)
        pseudo = generate_pseudo_labels(
            small_detector, target, PseudoLabelConfig(tau=0.0),
            tmp_path / "pseudo", "abc123")
        joint = build_student_dataset(translated, pseudo,
                                      tmp_path / "student" / "joint.json")
        assert len(joint.images) == len(translated.images) + len(
            pseudo.images)
        assert joint.info["provenance"] == {
            "ground-truth": len(translated.annotations),
            "pseudo": len(pseudo.annotations),
        }
        assert [r.id for r in joint.images] == list(
            range(1, len(joint.images) + 1))
        reloaded = load_manifest(tmp_path / "student" / "joint.json",
                                 include_annotations=True)
        for record in reloaded.images:
            assert reloaded.image_path(record).exists()
