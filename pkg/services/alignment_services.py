from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from core.exceptions import (AlignmentForbiddenError, ConfigurationError,
                             DataError)
from schemas.detector_model import (DetectorConfig, GrlConfig, LossReport,
                                    LossWeights, TrainConfig)
from schemas.scene_model import Domain, Sample
from services.model_services import (Detector, FeatureMap, LossComponents,
                                     detection_loss, forward,
                                     pooled_features, torch_dtype)

TRANSLATED_LABEL = 0.0
TARGET_LABEL = 1.0

_alignment_forbidden: ContextVar[bool] = ContextVar(
    "alignment_forbidden", default=False)


@contextmanager
def forbid_alignment() -> Iterator[None]:
    """Any gradient reversal or domain loss inside the block raises."""
    token = _alignment_forbidden.set(True)
    try:
        yield
    finally:
        _alignment_forbidden.reset(token)


def _check_allowed(what: str) -> None:
    if _alignment_forbidden.get():
        raise AlignmentForbiddenError(
            f"{what} invoked while feature alignment is forbidden")


def reverse_gradient(upstream, lambda_: float):
    """Backward rule of the reversal layer: -lambda * upstream."""
    return -lambda_ * upstream


def grl_backward(upstream_gradient: np.ndarray, lambda_: float) -> np.ndarray:
    """
    Gradient the reversal layer passes to the feature extractor.
    Args:
        upstream_gradient (np.ndarray): Gradient arriving from D.
        lambda_ (float): Reversal coefficient, >= 0.
    Returns:
        np.ndarray: ``-lambda * upstream_gradient`` elementwise.
    Raises:
        ConfigurationError: If lambda is negative.
    """
    if lambda_ < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lambda_}")
    return reverse_gradient(np.asarray(upstream_gradient, dtype=np.float64),
                            lambda_)


class GradientReversal(torch.autograd.Function):
    """Identity forward; multiplies the gradient by -lambda backward."""

    @staticmethod
    def forward(ctx, x, lambda_):
        ctx.lambda_ = lambda_
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return reverse_gradient(grad_output, ctx.lambda_), None


def gradient_reversal(x: torch.Tensor, lambda_: float) -> torch.Tensor:
    _check_allowed("gradient reversal")
    if lambda_ < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lambda_}")
    return GradientReversal.apply(x, lambda_)


class DomainClassifier(nn.Module):
    """Shallow binary classifier on globally pooled features."""

    def __init__(self, in_features: int, hidden_units: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden_units),
            nn.SiLU(),
            nn.Linear(hidden_units, 1),
        )

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled)[:, 0]


def build_domain_classifier(config: DetectorConfig, grl: GrlConfig,
                            seed: int) -> DomainClassifier:
    classifier = DomainClassifier(config.feature_channels, grl.hidden_units)
    classifier = classifier.to(torch_dtype(config))
    generator = torch.Generator().manual_seed(seed + 1)
    std = config.init_std
    with torch.no_grad():
        for name, parameter in classifier.named_parameters():
            if name.endswith("bias"):
                parameter.zero_()
            else:
                nn.init.trunc_normal_(parameter, std=std, a=-2 * std,
                                      b=2 * std, generator=generator)
    return classifier


def domain_bce(logits_translated: torch.Tensor,
               logits_target: torch.Tensor) -> torch.Tensor:
    """Mean BCE with label 0 for translated and 1 for target logits."""
    _check_allowed("domain loss")
    if logits_translated.numel() == 0 or logits_target.numel() == 0:
        raise ConfigurationError("domain loss needs both batches nonempty")
    logits = torch.cat([logits_translated.reshape(-1),
                        logits_target.reshape(-1)])
    labels = torch.cat([
        torch.full((logits_translated.numel(),), TRANSLATED_LABEL,
                   dtype=logits.dtype),
        torch.full((logits_target.numel(),), TARGET_LABEL,
                   dtype=logits.dtype),
    ])
    return F.binary_cross_entropy_with_logits(logits, labels)


def _pooled(features: FeatureMap | torch.Tensor) -> torch.Tensor:
    if isinstance(features, FeatureMap):
        return pooled_features(features)
    return features


def domain_loss(classifier: nn.Module,
                features_translated: FeatureMap | torch.Tensor,
                features_target: FeatureMap | torch.Tensor) -> torch.Tensor:
    """
    Domain classification loss of D on two feature batches.
    Args:
        classifier (nn.Module): The domain classifier D.
        features_translated (FeatureMap | torch.Tensor): Feature maps or
            pooled N x C features of translated-source images.
        features_target (FeatureMap | torch.Tensor): The same for target
            images.
    Returns:
        torch.Tensor: Scalar mean binary cross-entropy, >= 0.
    Raises:
        ConfigurationError: If either batch is empty.
    """
    translated = _pooled(features_translated)
    target = _pooled(features_target)
    if translated.shape[0] == 0 or target.shape[0] == 0:
        raise ConfigurationError("domain loss needs both batches nonempty")
    return domain_bce(classifier(translated), classifier(target))


def build_optimizer(modules: list[nn.Module],
                    config: TrainConfig) -> torch.optim.SGD:
    parameters = [p for module in modules for p in module.parameters()]
    return torch.optim.SGD(parameters, lr=config.lr_phase1,
                           momentum=config.momentum,
                           weight_decay=config.weight_decay,
                           foreach=False)


def _labeled_annotations(sample: Sample):
    if sample.annotations is None:
        raise DataError("labeled sample has no annotations")
    return sample.annotations


def compute_teacher_losses(detector: Detector, classifier: DomainClassifier,
                           labeled: Sample, unlabeled: Sample,
                           lambda_: float
                           ) -> tuple[LossComponents, torch.Tensor]:
    """
    Detection loss on the labeled sample and domain loss on both, with
    the domain gradient reversed before it reaches the backbone.
    """
    annotations = _labeled_annotations(labeled)
    if labeled.domain == Domain.TARGET:
        raise DataError("teacher labeled sample must not be a target image")
    if unlabeled.domain != Domain.TARGET:
        raise DataError(
            f"teacher unlabeled sample must be a target image, "
            f"got {unlabeled.domain.value}")
    labeled_features, pred = forward(detector, labeled.image)
    components = detection_loss(pred, annotations)
    target_features, _ = forward(detector, unlabeled.image)
    translated = gradient_reversal(pooled_features(labeled_features),
                                   lambda_)
    target = gradient_reversal(pooled_features(target_features), lambda_)
    return components, domain_loss(classifier, translated, target)


def teacher_step(detector: Detector, classifier: DomainClassifier,
                 labeled: Sample, unlabeled: Sample, grl: GrlConfig,
                 optimizer: torch.optim.Optimizer, iteration: int = 1,
                 weights: LossWeights | None = None) -> LossReport:
    """
    One optimization step on one labeled and one unlabeled image.
    D minimizes the domain loss; the backbone gets the detection gradient
    plus the reversed domain gradient; the heads get detection only.
    Args:
        detector (Detector): Teacher detector, updated in place.
        classifier (DomainClassifier): D, updated in place.
        labeled (Sample): Translated (or source) sample with annotations.
        unlabeled (Sample): Target sample; its annotations are not read.
        grl (GrlConfig): Reversal coefficient and schedule.
        optimizer (torch.optim.Optimizer): Optimizer over both modules.
        iteration (int): 1-based iteration for the lambda schedule.
        weights (LossWeights | None): Detection component weights.
    Returns:
        LossReport: Detection components and the domain loss.
    Raises:
        DataError: If the labeled sample has no annotations.
    """
    weights = weights or detector.config.loss_weights
    optimizer.zero_grad(set_to_none=True)
    components, dom = compute_teacher_losses(
        detector, classifier, labeled, unlabeled, grl.lambda_at(iteration))
    (components.total(weights) + dom).backward()
    optimizer.step()
    return LossReport(
        det_objectness=float(components.objectness),
        det_class=float(components.classification),
        det_box=float(components.box),
        domain=float(dom),
    )
