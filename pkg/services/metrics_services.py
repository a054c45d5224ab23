from pathlib import Path

import numpy as np
import torch
from loguru import logger
from scipy import linalg

from core.audit import audit
from core.exceptions import ConfigurationError, UndefinedCoverageError
from schemas.detector_model import Detection
from schemas.experiment_model import EvalConfig
from schemas.report_model import ApMode, ApResult, EvalReport, FeatureStats
from schemas.scene_model import Annotation, CLASS_NAMES, DatasetManifest
from services.model_services import (Detector, detect, forward,
                                     pooled_features)
from utilis.box_helper import iou
from utilis.image_helper import load_png
from utilis.manifest_helper import load_manifest, load_samples

EIGENVALUE_TOLERANCE = 1e-6
# Recall points of the 11-point interpolation, exact tenths.
VOC11_RECALLS = [k / 10 for k in range(11)]
EVALUATOR = "evaluator"


def match_detections(detections: list[list[Detection]],
                     ground_truth: list[list[Annotation]], class_id: int,
                     iou_threshold: float) -> tuple[list[bool], int]:
    """
    Greedy matching of one class across images.
    Detections are visited by descending score, ties broken by detection
    id (image order, then list order). Each one takes the unmatched
    ground truth of its image with the highest IoU; it is a true positive
    when that IoU reaches the threshold.
    Returns:
        tuple[list[bool], int]: TP flags in visiting order and the number
            of ground-truth instances of the class.
    """
    candidates = []
    detection_id = 0
    for image_index, image_detections in enumerate(detections):
        for detection in image_detections:
            if detection.class_id == class_id:
                candidates.append((-detection.score, detection_id,
                                   image_index, detection))
            detection_id += 1
    candidates.sort(key=lambda c: (c[0], c[1]))

    gt_boxes = [[a.box for a in annotations if a.class_id == class_id]
                for annotations in ground_truth]
    matched = [[False] * len(boxes) for boxes in gt_boxes]
    flags = []
    for _, _, image_index, detection in candidates:
        best, best_iou = -1, -1.0
        for gt_index, box in enumerate(gt_boxes[image_index]):
            if matched[image_index][gt_index]:
                continue
            overlap = iou(detection.box, box)
            if overlap > best_iou:
                best, best_iou = gt_index, overlap
        if best >= 0 and best_iou >= iou_threshold:
            matched[image_index][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, sum(len(boxes) for boxes in gt_boxes)


def ap_from_curve(true_positives: list[bool], gt_count: int,
                  mode: ApMode) -> float:
    """
    AP from ranked TP flags.
    Args:
        true_positives (list[bool]): TP flags by descending score.
        gt_count (int): Ground-truth instances, > 0.
        mode (ApMode): ``voc11`` averages the best precision at recall
            >= 0, 0.1, ..., 1; ``allpoint`` integrates the monotone
            precision envelope.
    Returns:
        float: Average precision in [0, 1].
    """
    if not true_positives:
        return 0.0
    tp = np.cumsum(np.asarray(true_positives, dtype=np.float64))
    fp = np.cumsum(~np.asarray(true_positives, dtype=bool))
    recalls = tp / gt_count
    precisions = tp / (tp + fp)
    if mode == ApMode.VOC11:
        total = 0.0
        for threshold in VOC11_RECALLS:
            reached = precisions[recalls >= threshold]
            total += float(reached.max()) if reached.size else 0.0
        return total / len(VOC11_RECALLS)
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: list[list[Detection]],
                      ground_truth: list[list[Annotation]],
                      iou_threshold: float = 0.5,
                      mode: ApMode = ApMode.ALLPOINT,
                      num_classes: int = len(CLASS_NAMES)) -> ApResult:
    """
    Per-class AP and mAP over a set of images.
    Args:
        detections (list[list[Detection]]): Scored detections per image.
        ground_truth (list[list[Annotation]]): Annotations per image.
        iou_threshold (float): Minimum IoU of a true positive.
        mode (ApMode): Interpolation convention.
        num_classes (int): Number of categories.
    Returns:
        ApResult: Classes without ground truth get AP None and are left
            out of the mean.
    """
    if len(detections) != len(ground_truth):
        raise ConfigurationError(
            "detections and ground truth cover different image counts")
    per_class: dict[int, float | None] = {}
    for class_id in range(num_classes):
        flags, gt_count = match_detections(detections, ground_truth,
                                           class_id, iou_threshold)
        per_class[class_id] = (ap_from_curve(flags, gt_count, mode)
                               if gt_count else None)
    defined = [ap for ap in per_class.values() if ap is not None]
    mean_ap = float(np.mean(defined)) if defined else None
    return ApResult(mode=mode, per_class=per_class, mean_ap=mean_ap)


def coverage(map_baseline: float, map_adapted: float,
             map_oracle: float) -> float:
    """
    Fraction of the baseline-to-oracle gap closed by the adapted model.
    Raises:
        UndefinedCoverageError: If oracle and baseline mAP are equal.
    """
    if map_oracle == map_baseline:
        raise UndefinedCoverageError(
            f"coverage undefined: oracle and baseline mAP both "
            f"{map_baseline}")
    return (map_adapted - map_baseline) / (map_oracle - map_baseline)


def feature_stats(detector: Detector,
                  manifest: DatasetManifest) -> FeatureStats:
    """
    Mean and unbiased covariance of globally pooled backbone features.
    Only image files are read.
    Raises:
        ConfigurationError: If the manifest is empty.
    """
    if not manifest.images:
        raise ConfigurationError("feature statistics need a nonempty "
                                 "manifest")
    rows = []
    with torch.no_grad():
        for record in manifest.images:
            features, _ = forward(detector,
                                  load_png(manifest.image_path(record)))
            rows.append(pooled_features(features)[0].double().numpy())
    features = np.stack(rows)
    if len(features) == 1:
        logger.warning("Feature statistics of a single image; "
                       "covariance set to zero")
        covariance = np.zeros((features.shape[1], features.shape[1]))
    else:
        covariance = np.cov(features, rowvar=False, ddof=1)
        covariance = (covariance + covariance.T) / 2
    return FeatureStats(mean=features.mean(axis=0).tolist(),
                        covariance=covariance.tolist(),
                        sample_count=len(features))


def _clamped_eigenvalues(matrix: np.ndarray, what: str) -> np.ndarray:
    values = linalg.eigvalsh(matrix)
    if values.min(initial=0.0) < -EIGENVALUE_TOLERANCE:
        logger.warning(f"{what} has eigenvalue {values.min():.3e} below "
                       f"-{EIGENVALUE_TOLERANCE}; clamping to 0")
    return np.clip(values, 0.0, None)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    if values.min(initial=0.0) < -EIGENVALUE_TOLERANCE:
        logger.warning(f"covariance eigenvalue {values.min():.3e} clamped")
    roots = np.sqrt(np.clip(values, 0.0, None))
    return (vectors * roots) @ vectors.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """
    Squared Frechet distance between the Gaussian fits of two feature sets,
    using the symmetric form Tr((S_a^1/2 S_b S_a^1/2)^1/2).
    Args:
        a (FeatureStats): First distribution.
        b (FeatureStats): Second distribution.
    Returns:
        float: Distance, >= 0.
    Raises:
        ConfigurationError: If the feature dimensions differ.
    """
    if a.dim != b.dim:
        raise ConfigurationError(
            f"feature dimensions differ: {a.dim} vs {b.dim}")
    mean_diff = a.mean_array() - b.mean_array()
    cov_a, cov_b = a.cov_array(), b.cov_array()
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = (middle + middle.T) / 2
    trace_covmean = float(np.sum(np.sqrt(
        _clamped_eigenvalues(middle, "covariance product"))))
    distance = (float(mean_diff @ mean_diff) + float(np.trace(cov_a))
                + float(np.trace(cov_b)) - 2.0 * trace_covmean)
    return max(distance, 0.0)


def evaluate(detector: Detector, manifest_path: Path,
             config: EvalConfig | None = None,
             modes: tuple[ApMode, ...] = (ApMode.VOC11, ApMode.ALLPOINT),
             metadata: dict | None = None) -> EvalReport:
    """
    Detect on every image of a labeled manifest and score AP@IoU.
    Ground truth is read under the evaluator audit consumer.
    Args:
        detector (Detector): Model to evaluate.
        manifest_path (Path): Labeled evaluation manifest.
        config (EvalConfig | None): Floor, NMS, IoU and detection cap.
        modes (tuple[ApMode, ...]): Interpolation modes to report.
        metadata (dict | None): Merged into the report metadata.
    Returns:
        EvalReport: Per-class AP and mAP per mode.
    """
    config = config or EvalConfig()
    with audit.consumer(EVALUATOR):
        manifest = load_manifest(manifest_path, include_annotations=True)
        samples = load_samples(manifest)

    detections = [detect(detector, sample.image, config.objectness_floor,
                         config.nms_iou, config.max_detections)
                  for sample in samples]
    ground_truth = [sample.annotations or [] for sample in samples]
    num_classes = detector.config.num_classes

    per_class_ap: dict[ApMode, dict[str, float | None]] = {}
    map50: dict[ApMode, float | None] = {}
    for mode in modes:
        result = average_precision(detections, ground_truth,
                                   config.iou_threshold, mode, num_classes)
        per_class_ap[mode] = {CLASS_NAMES[k]: ap
                              for k, ap in result.per_class.items()}
        map50[mode] = result.mean_ap

    gt_per_class = {name: 0 for name in CLASS_NAMES[:num_classes]}
    for annotations in ground_truth:
        for annotation in annotations:
            gt_per_class[CLASS_NAMES[annotation.class_id]] += 1
    return EvalReport(
        per_class_ap=per_class_ap,
        map50=map50,
        detection_count=sum(len(d) for d in detections),
        gt_count=sum(gt_per_class.values()),
        gt_per_class=gt_per_class,
        metadata={
            "manifest": str(manifest_path),
            "images": len(samples),
            "iou_threshold": config.iou_threshold,
            "objectness_floor": config.objectness_floor,
            "max_detections": config.max_detections,
            "excluded_classes": [name for name, n in gt_per_class.items()
                                 if n == 0],
            "note": "classes without ground truth are excluded from mAP",
            **(metadata or {}),
        },
    )
