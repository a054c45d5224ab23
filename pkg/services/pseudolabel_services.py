from pathlib import Path

import numpy as np
import torch
from loguru import logger

from core.exceptions import (ConfigurationError, DataError,
                             InternalInvariantError)
from schemas.detector_model import Detection, LabelMode, PseudoLabelConfig
from schemas.scene_model import (Annotation, DatasetManifest, Domain,
                                 Provenance)
from services.model_services import Detector, decode, forward, nms
from utilis.image_helper import load_png
from utilis.manifest_helper import (concatenate_manifests,
                                    provenance_histogram,
                                    record_from_annotation, write_json,
                                    write_manifest)

PROBABILITY_FLOOR = 1e-12


def soft_distribution(logits, temperature: float) -> np.ndarray:
    """
    Tempered softmax exp(z_i/T) / sum_j exp(z_j/T), stabilized by
    subtracting the maximum.
    Raises:
        ConfigurationError: If T <= 0.
    """
    if temperature <= 0:
        raise ConfigurationError(
            f"temperature must be > 0, got {temperature}")
    scaled = np.asarray(logits, dtype=np.float64) / temperature
    weights = np.exp(scaled - scaled.max())
    return weights / weights.sum()


def mixed_classification_loss(q, p, p_hat, alpha: float) -> float:
    """
    -sum_i [alpha p_i + (1 - alpha) p_hat_i] log q_i.
    With alpha = 1 this is the hard cross-entropy -log q[true class].
    Args:
        q: Predicted class probabilities.
        p: One-hot hard label.
        p_hat: Soft label distribution.
        alpha (float): Weight of the hard label, in [0, 1].
    Returns:
        float: The loss, >= 0.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if alpha == 1.0:
        weights = p
    else:
        weights = alpha * p + (1.0 - alpha) * p_hat
    support = weights > 0
    if np.any(q[support] <= 0.0):
        logger.warning(f"Predicted probability clamped to "
                       f"{PROBABILITY_FLOOR} on a supported class")
    log_q = np.log(np.maximum(q[support], PROBABILITY_FLOOR))
    return float(-np.sum(weights[support] * log_q))


def _selection_score(detection: Detection, config: PseudoLabelConfig
                     ) -> float:
    if config.score_source == "score":
        return detection.score
    return detection.objectness


def _to_annotation(detection: Detection, config: PseudoLabelConfig
                   ) -> Annotation:
    return Annotation(
        box=detection.box,
        class_id=detection.class_id,
        provenance=Provenance.PSEUDO,
        score=_selection_score(detection, config),
        class_logits=(detection.class_logits
                      if config.label_mode == LabelMode.SOFT else None),
    )


def candidate_detections(teacher: Detector, manifest: DatasetManifest,
                         config: PseudoLabelConfig
                         ) -> list[list[Detection]]:
    """
    Post-NMS teacher detections per target image, before thresholding.
    Only image files are read.
    Raises:
        DataError: Naming the file when an image cannot be read.
    """
    candidates = []
    with torch.no_grad():
        for record in manifest.images:
            if record.domain != Domain.TARGET:
                raise DataError(f"{record.file} is not a target image")
            image = load_png(manifest.image_path(record))
            _, pred = forward(teacher, image)
            candidates.append(
                nms(decode(pred, 0.0), config.nms_iou)[:config.max_detections])
    return candidates


def select_pseudo_labels(candidates: list[list[Detection]],
                         config: PseudoLabelConfig
                         ) -> list[list[Annotation]]:
    """Keep candidates whose selection score is >= tau."""
    return [[_to_annotation(d, config) for d in detections
             if _selection_score(d, config) >= config.tau]
            for detections in candidates]


def generate_pseudo_labels(teacher: Detector, target_manifest: DatasetManifest,
                           config: PseudoLabelConfig, out_dir: Path,
                           teacher_checkpoint_hash: str,
                           name: str = "pseudo") -> DatasetManifest:
    """
    Label target images with the teacher.
    Every image is forwarded, decoded, suppressed at the configured IoU
    and thresholded at tau (>= convention, applied after NMS). The manifest
    reuses the target image files; a sidecar records the selection
    settings and counts.
    Args:
        teacher (Detector): Frozen teacher.
        target_manifest (DatasetManifest): Target images, labels withheld.
        config (PseudoLabelConfig): Threshold and label mode.
        out_dir (Path): Directory receiving ``<name>.json`` and its sidecar.
        teacher_checkpoint_hash (str): Recorded in the sidecar.
        name (str): Manifest file stem.
    Returns:
        DatasetManifest: Target images with pseudo annotations.
    """
    candidates = candidate_detections(teacher, target_manifest, config)
    labels = select_pseudo_labels(candidates, config)

    pseudo = concatenate_manifests([_images_only(target_manifest)], out_dir)
    annotation_id = 1
    for record, annotations in zip(pseudo.images, labels):
        for annotation in annotations:
            pseudo.annotations.append(
                record_from_annotation(annotation, annotation_id, record.id))
            annotation_id += 1
    kept = len(pseudo.annotations)
    total = sum(len(c) for c in candidates)
    pseudo.info = {"split": name, "tau": config.tau}
    write_manifest(pseudo, out_dir / f"{name}.json")
    write_json(out_dir / f"{name}.sidecar.json", {
        "tau": config.tau,
        "label_mode": config.label_mode.value,
        "T": config.temperature,
        "alpha": config.alpha,
        "score_source": config.score_source,
        "teacher_checkpoint_hash": teacher_checkpoint_hash,
        "kept_count": kept,
        "total_count": total,
    })
    logger.info(f"Kept {kept} of {total} teacher detections at "
                f"tau={config.tau}")
    return pseudo


def _images_only(manifest: DatasetManifest) -> DatasetManifest:
    images = manifest.model_copy(update={"annotations": []})
    images._root = manifest.root
    return images


def sweep_thresholds(teacher: Detector, target_manifest: DatasetManifest,
                     config: PseudoLabelConfig,
                     taus: list[float]) -> dict[float, int]:
    """
    Kept pseudo-label counts per threshold from a single inference pass.
    """
    candidates = candidate_detections(teacher, target_manifest, config)
    counts = {}
    for tau in taus:
        swept = config.model_copy(update={"tau": tau})
        counts[tau] = sum(len(a) for a in select_pseudo_labels(candidates,
                                                                swept))
    return counts


def build_student_dataset(translated_manifest: DatasetManifest,
                          pseudo: DatasetManifest,
                          out_path: Path) -> DatasetManifest:
    """
    Join translated (ground-truth) and pseudo-labeled target data.
    Args:
        translated_manifest (DatasetManifest): Labeled translated or
            source images.
        pseudo (DatasetManifest): Pseudo-labeled target images.
        out_path (Path): Where the joint manifest is written.
    Returns:
        DatasetManifest: Concatenation with ids re-keyed from 1.
    Raises:
        InternalInvariantError: If ids collide after re-keying.
    """
    joint = concatenate_manifests([translated_manifest, pseudo],
                                  out_path.parent)
    image_ids = [record.id for record in joint.images]
    annotation_ids = [record.id for record in joint.annotations]
    if (len(set(image_ids)) != len(image_ids)
            or len(set(annotation_ids)) != len(annotation_ids)):
        raise InternalInvariantError("id collision in the student dataset")
    joint.info = {"split": out_path.stem,
                  "provenance": provenance_histogram(joint)}
    write_manifest(joint, out_path)
    return joint
