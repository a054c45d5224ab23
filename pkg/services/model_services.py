import hashlib
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError
from torch import nn

from core.exceptions import CheckpointError, ConfigurationError
from schemas.detector_model import Detection, DetectorConfig, LossWeights
from schemas.scene_model import Annotation, Provenance
from utilis.box_helper import cell_of, decode_box, encode_box, iou
from utilis.image_helper import image_to_tensor
from utilis.manifest_helper import content_hash, read_json, write_json

CHECKPOINT_FORMAT = "uda-checkpoint"
CHECKPOINT_VERSION = 1
# Inputs in [0, 1] are mapped to roughly zero mean and unit spread.
INPUT_SHIFT = 0.5
INPUT_SCALE = 0.25


class FeatureMap(NamedTuple):
    values: torch.Tensor  # N x C x H' x W'
    stride: int


class RawPrediction(NamedTuple):
    objectness_logits: torch.Tensor  # N x H' x W'
    class_logits: torch.Tensor       # N x K x H' x W'
    box_deltas: torch.Tensor         # N x 4 x H' x W'
    stride: int
    image_size: tuple[int, int]      # (H, W)


class LossComponents(NamedTuple):
    objectness: torch.Tensor
    classification: torch.Tensor
    box: torch.Tensor

    def total(self, weights: LossWeights | None = None) -> torch.Tensor:
        weights = weights or LossWeights()
        return (weights.objectness * self.objectness
                + weights.classification * self.classification
                + weights.box * self.box)


class SoftLabelParams(NamedTuple):
    temperature: float
    alpha: float


def torch_dtype(config: DetectorConfig) -> torch.dtype:
    return torch.float64 if config.dtype == "float64" else torch.float32


class Detector(nn.Module):
    """
    Single-stage grid detector: a strided conv backbone (Phi) followed by
    three 1x1 heads (Psi) predicting objectness, class logits and box
    edge offsets for every cell.
    """

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_channels = 3
        for channels, stride in zip(config.stage_channels,
                                    config.stage_strides):
            layers.append(nn.Conv2d(in_channels, channels, kernel_size=3,
                                    stride=stride, padding=1))
            layers.append(nn.SiLU())
            in_channels = channels
        self.backbone = nn.Sequential(*layers)
        self.objectness_head = nn.Conv2d(in_channels, 1, kernel_size=1)
        self.class_head = nn.Conv2d(in_channels, config.num_classes,
                                    kernel_size=1)
        self.box_head = nn.Conv2d(in_channels, 4, kernel_size=1)

    @property
    def stride(self) -> int:
        return self.config.stride

    def extract(self, images: torch.Tensor) -> FeatureMap:
        values = self.backbone((images - INPUT_SHIFT) / INPUT_SCALE)
        return FeatureMap(values=values, stride=self.stride)

    def predict(self, features: FeatureMap,
                image_size: tuple[int, int]) -> RawPrediction:
        return RawPrediction(
            objectness_logits=self.objectness_head(features.values)[:, 0],
            class_logits=self.class_head(features.values),
            box_deltas=self.box_head(features.values),
            stride=features.stride,
            image_size=image_size,
        )

    def forward(self, images: torch.Tensor
                ) -> tuple[FeatureMap, RawPrediction]:
        features = self.extract(images)
        return features, self.predict(features, tuple(images.shape[-2:]))

    def feature_parameters(self) -> list[nn.Parameter]:
        return list(self.backbone.parameters())

    def head_parameters(self) -> list[nn.Parameter]:
        return [*self.objectness_head.parameters(),
                *self.class_head.parameters(),
                *self.box_head.parameters()]


def build_detector(config: DetectorConfig, seed: int) -> Detector:
    """
    Create a detector with truncated-normal weights and zero biases.
    Args:
        config (DetectorConfig): Architecture and dtype.
        seed (int): Initialization seed.
    Returns:
        Detector: A freshly initialized detector.
    """
    detector = Detector(config).to(torch_dtype(config))
    generator = torch.Generator().manual_seed(seed)
    std = config.init_std
    with torch.no_grad():
        for name, parameter in detector.named_parameters():
            if name.endswith("bias"):
                parameter.zero_()
            else:
                nn.init.trunc_normal_(parameter, std=std, a=-2 * std,
                                      b=2 * std, generator=generator)
    return detector


def as_batch(image: np.ndarray | torch.Tensor,
             dtype: torch.dtype) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.unsqueeze(0) if image.dim() == 3 else image
    return image_to_tensor(image, dtype)


def forward(detector: Detector, image: np.ndarray | torch.Tensor
            ) -> tuple[FeatureMap, RawPrediction]:
    """
    Run the detector on one HxWx3 image (or an Nx3xHxW tensor).
    Raises:
        ConfigurationError: If H or W is not divisible by the stride.
    """
    batch = as_batch(image, torch_dtype(detector.config))
    height, width = batch.shape[-2:]
    if height % detector.stride or width % detector.stride:
        raise ConfigurationError(
            f"image size {height}x{width} not divisible by "
            f"stride {detector.stride}")
    return detector(batch)


def pooled_features(features: FeatureMap) -> torch.Tensor:
    """Global average pool, N x C."""
    return features.values.mean(dim=(2, 3))


def _assign_cells(annotations: list[Annotation], stride: int,
                  grid_h: int, grid_w: int) -> dict[tuple[int, int],
                                                    Annotation]:
    """
    Map each positive cell to its annotation. A box owns the cell holding
    its center; when two centers share a cell the larger box wins.
    """
    cells: dict[tuple[int, int], Annotation] = {}
    for annotation in sorted(annotations, key=lambda a: a.box.area):
        cells[cell_of(annotation.box, stride, grid_h, grid_w)] = annotation
    return cells


def _class_target(annotation: Annotation, num_classes: int,
                  soft: SoftLabelParams | None, dtype: torch.dtype
                  ) -> torch.Tensor | None:
    """Mixed target distribution, or None for plain cross-entropy."""
    if (soft is None or annotation.provenance != Provenance.PSEUDO
            or annotation.class_logits is None):
        return None
    hard = F.one_hot(torch.tensor(annotation.class_id),
                     num_classes).to(dtype)
    logits = torch.tensor(annotation.class_logits, dtype=dtype)
    p_hat = torch.softmax(logits / soft.temperature, dim=0)
    return soft.alpha * hard + (1.0 - soft.alpha) * p_hat


def detection_loss(pred: RawPrediction, annotations: list[Annotation],
                   soft: SoftLabelParams | None = None) -> LossComponents:
    """
    Detection loss of a single-image prediction.
    Objectness BCE is summed over all cells and divided by
    max(1, #positives); classification cross-entropy and smooth-L1 box
    loss (beta 1, stride units) are averaged over positive cells.
    Args:
        pred (RawPrediction): Prediction with batch size 1.
        annotations (list[Annotation]): Labels of the image, may be empty.
        soft (SoftLabelParams | None): Softens the classification target of
            pseudo annotations carrying logits.
    Returns:
        LossComponents: The three non-negative components.
    """
    objectness_logits = pred.objectness_logits[0]
    class_logits = pred.class_logits[0]
    box_deltas = pred.box_deltas[0]
    grid_h, grid_w = objectness_logits.shape
    num_classes = class_logits.shape[0]
    dtype = objectness_logits.dtype

    cells = _assign_cells(annotations, pred.stride, grid_h, grid_w)
    objectness_target = torch.zeros_like(objectness_logits)
    for row, col in cells:
        objectness_target[row, col] = 1.0
    positives = max(1, len(cells))
    objectness = F.binary_cross_entropy_with_logits(
        objectness_logits, objectness_target, reduction="sum") / positives

    zero = objectness_logits.sum() * 0.0
    if not cells:
        return LossComponents(objectness, zero, zero.clone())

    class_terms = []
    box_terms = []
    for (row, col), annotation in sorted(cells.items()):
        logits = class_logits[:, row, col]
        target = _class_target(annotation, num_classes, soft, dtype)
        if target is None:
            class_terms.append(F.cross_entropy(
                logits.unsqueeze(0),
                torch.tensor([annotation.class_id])))
        else:
            class_terms.append(
                -(target * torch.log_softmax(logits, dim=0)).sum())
        box_target = torch.tensor(
            encode_box(annotation.box, row, col, pred.stride), dtype=dtype)
        box_terms.append(F.smooth_l1_loss(
            box_deltas[:, row, col], box_target, reduction="sum", beta=1.0))
    classification = torch.stack(class_terms).mean()
    box = torch.stack(box_terms).mean()
    return LossComponents(objectness, classification, box)


def decode(pred: RawPrediction, objectness_floor: float) -> list[Detection]:
    """
    One candidate per cell whose objectness probability reaches the floor,
    in row-major cell order.
    Args:
        pred (RawPrediction): Prediction with batch size 1.
        objectness_floor (float): Minimum sigmoid(objectness), in [0, 1].
    Returns:
        list[Detection]: Decoded candidates with boxes clipped to the image.
    """
    if not 0.0 <= objectness_floor <= 1.0:
        raise ConfigurationError(
            f"objectness floor must lie in [0, 1], got {objectness_floor}")
    with torch.no_grad():
        objectness = torch.sigmoid(
            pred.objectness_logits[0].double()).numpy()
        logits = pred.class_logits[0].double()
        probabilities = torch.softmax(logits, dim=0).numpy()
        logits = logits.numpy()
        deltas = pred.box_deltas[0].double().numpy()
    height, width = pred.image_size
    grid_h, grid_w = objectness.shape

    detections = []
    for row in range(grid_h):
        for col in range(grid_w):
            obj = float(objectness[row, col])
            if obj < objectness_floor:
                continue
            class_id = int(np.argmax(probabilities[:, row, col]))
            class_prob = float(probabilities[class_id, row, col])
            box = decode_box(tuple(float(d) for d in deltas[:, row, col]),
                             row, col, pred.stride, width, height)
            detections.append(Detection(
                box=box,
                class_id=class_id,
                objectness=obj,
                class_prob=class_prob,
                score=min(obj * class_prob, 1.0),
                class_logits=[float(z) for z in logits[:, row, col]],
            ))
    return detections


def nms(detections: list[Detection],
        iou_threshold: float) -> list[Detection]:
    """
    Greedy class-agnostic suppression by descending score. Equal scores keep
    their input order.
    Args:
        detections (list[Detection]): Candidates.
        iou_threshold (float): A candidate is dropped when its IoU with a
            kept detection exceeds this value.
    Returns:
        list[Detection]: Kept detections, highest score first.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConfigurationError(
            f"NMS IoU threshold must lie in [0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    kept: list[Detection] = []
    for index in order:
        candidate = detections[index]
        if all(iou(candidate.box, other.box) <= iou_threshold
               for other in kept):
            kept.append(candidate)
    return kept


def detect(detector: Detector, image: np.ndarray, objectness_floor: float,
           nms_iou: float, max_detections: int) -> list[Detection]:
    """Forward, decode, NMS and keep the top ``max_detections``."""
    with torch.no_grad():
        _, pred = forward(detector, image)
    return nms(decode(pred, objectness_floor), nms_iou)[:max_detections]


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().contiguous().numpy().tobytes()


def params_hash(module: nn.Module) -> str:
    """sha256 over parameter names, shapes and raw values."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(_tensor_bytes(tensor))
    return digest.hexdigest()


def _encode_tensors(tensors: dict[str, torch.Tensor]) -> dict:
    return {name: {"shape": list(tensor.shape),
                   "values": tensor.detach().cpu().reshape(-1).tolist()}
            for name, tensor in sorted(tensors.items())}


def _decode_tensors(payload: dict, dtype: torch.dtype
                    ) -> dict[str, torch.Tensor]:
    try:
        return {name: torch.tensor(entry["values"], dtype=dtype).reshape(
                    entry["shape"])
                for name, entry in payload.items()}
    except (KeyError, TypeError, RuntimeError) as e:
        raise CheckpointError(f"malformed tensor entry: {e}") from e


def momentum_buffers(optimizer: torch.optim.Optimizer,
                     named: dict[str, nn.Parameter]
                     ) -> dict[str, torch.Tensor]:
    buffers = {}
    for name, parameter in named.items():
        state = optimizer.state.get(parameter, {})
        if state.get("momentum_buffer") is not None:
            buffers[name] = state["momentum_buffer"]
    return buffers


def restore_momentum(optimizer: torch.optim.Optimizer,
                     named: dict[str, nn.Parameter],
                     buffers: dict[str, torch.Tensor]) -> None:
    for name, buffer in buffers.items():
        if name not in named:
            raise CheckpointError(f"momentum buffer for unknown "
                                  f"parameter {name}")
        optimizer.state[named[name]]["momentum_buffer"] = buffer.clone()


class Checkpoint(BaseModel):
    """A loaded checkpoint; tensors are restored into fresh modules."""
    detector: Detector
    iteration: int = 0
    domain_classifier_state: dict[str, torch.Tensor] | None = None
    momentum: dict[str, torch.Tensor] = {}
    params_hash: str
    extra: dict = {}

    model_config = ConfigDict(arbitrary_types_allowed=True)


def save_checkpoint(path: Path, detector: Detector, iteration: int = 0,
                    domain_classifier: nn.Module | None = None,
                    momentum: dict[str, torch.Tensor] | None = None,
                    extra: dict | None = None) -> str:
    """
    Write a JSON checkpoint with a versioned header.
    Args:
        path (Path): Output file.
        detector (Detector): Detector whose parameters are stored.
        iteration (int): Training iteration the state belongs to.
        domain_classifier (nn.Module | None): Stored when given.
        momentum (dict | None): Momentum buffers keyed by parameter name.
        extra (dict | None): Free-form metadata.
    Returns:
        str: The detector parameter hash.
    """
    digest = params_hash(detector)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": detector.config.model_dump(mode="json"),
        "config_hash": content_hash(detector.config),
        "iteration": iteration,
        "params_hash": digest,
        "params": _encode_tensors(detector.state_dict()),
        "domain_classifier": (
            _encode_tensors(domain_classifier.state_dict())
            if domain_classifier is not None else None),
        "momentum": _encode_tensors(momentum or {}),
        "extra": extra or {},
    }
    write_json(path, payload)
    logger.debug(f"Saved checkpoint {path} at iteration {iteration}")
    return digest


def load_checkpoint(path: Path,
                    config: DetectorConfig | None = None) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.
    Args:
        path (Path): Checkpoint file.
        config (DetectorConfig | None): When given, the stored config must
            match it.
    Returns:
        Checkpoint: Restored detector and training state.
    Raises:
        CheckpointError: On a bad header, config mismatch or hash mismatch.
    """
    payload = read_json(path)
    if (payload.get("format") != CHECKPOINT_FORMAT
            or payload.get("version") != CHECKPOINT_VERSION):
        raise CheckpointError(f"{path} is not a version "
                              f"{CHECKPOINT_VERSION} checkpoint")
    try:
        stored_config = DetectorConfig.model_validate(payload["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path} has an invalid config: {e}") from e
    if config is not None and content_hash(config) != content_hash(
            stored_config):
        raise CheckpointError(
            f"{path} was written for a different detector config")

    dtype = torch_dtype(stored_config)
    detector = Detector(stored_config).to(dtype)
    try:
        detector.load_state_dict(
            _decode_tensors(payload["params"], dtype))
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path} parameters do not fit: {e}") from e
    digest = params_hash(detector)
    if digest != payload.get("params_hash"):
        raise CheckpointError(f"{path} parameter hash mismatch")

    classifier = payload.get("domain_classifier")
    return Checkpoint(
        detector=detector,
        iteration=int(payload.get("iteration", 0)),
        domain_classifier_state=(_decode_tensors(classifier, dtype)
                                 if classifier is not None else None),
        momentum=_decode_tensors(payload.get("momentum", {}), dtype),
        params_hash=digest,
        extra=payload.get("extra", {}),
    )


def checkpoint_hash(path: Path) -> str:
    """Parameter hash recorded in a checkpoint file."""
    payload = read_json(path)
    if "params_hash" not in payload:
        raise CheckpointError(f"{path} carries no parameter hash")
    return payload["params_hash"]
