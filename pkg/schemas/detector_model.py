from enum import Enum
from typing import Literal

from pydantic import (BaseModel, ConfigDict, Field, field_validator,
                      model_validator)
from loguru import logger

from schemas.scene_model import BoundingBox, CLASS_NAMES


class Role(str, Enum):
    BASELINE = "baseline"
    ORACLE = "oracle"
    TEACHER = "teacher"
    STUDENT = "student"


class LabelMode(str, Enum):
    HARD = "hard"
    SOFT = "soft"


class Detection(BaseModel):
    box: BoundingBox
    class_id: int = Field(ge=0)
    objectness: float = Field(ge=0.0, le=1.0)
    class_prob: float = Field(ge=0.0, le=1.0)
    score: float = Field(ge=0.0, le=1.0)
    class_logits: list[float] | None = None

    model_config = ConfigDict(frozen=True)


class LossWeights(BaseModel):
    objectness: float = Field(default=1.0, ge=0.0)
    classification: float = Field(default=1.0, ge=0.0)
    box: float = Field(default=1.0, ge=0.0)


class DetectorConfig(BaseModel):
    num_classes: int = Field(default=len(CLASS_NAMES), ge=1)
    stage_channels: list[int] = Field(default_factory=lambda: [32, 32, 64, 64])
    stage_strides: list[int] = Field(default_factory=lambda: [1, 2, 2, 2])
    init_std: float = Field(default=0.05, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"
    loss_weights: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def check_stages(self) -> "DetectorConfig":
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("one stride per backbone stage is required")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError("stage strides must be 1 or 2")
        return self

    @property
    def stride(self) -> int:
        stride = 1
        for s in self.stage_strides:
            stride *= s
        return stride

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]


class GrlConfig(BaseModel):
    lambda_: float = Field(default=1.0, ge=0.0, alias="lambda",
                           allow_inf_nan=False)
    schedule: Literal["constant", "ramp"] = "constant"
    ramp_start: float = Field(default=0.0, ge=0.0)
    ramp_end: float = Field(default=1.0, ge=0.0)
    ramp_steps: int = Field(default=1000, ge=1)
    hidden_units: int = Field(default=64, ge=1)

    model_config = ConfigDict(populate_by_name=True)

    def lambda_at(self, iteration: int) -> float:
        """Reversal coefficient for a 1-based iteration."""
        if self.schedule == "constant":
            return self.lambda_
        progress = min(max(iteration - 1, 0) / self.ramp_steps, 1.0)
        return self.ramp_start + (self.ramp_end - self.ramp_start) * progress


class PseudoLabelConfig(BaseModel):
    tau: float = Field(default=0.5, ge=0.0, le=1.0)
    label_mode: LabelMode = LabelMode.HARD
    temperature: float = Field(default=1.0, gt=0.0)
    alpha: float | None = Field(default=None, ge=0.0, le=1.0)
    score_source: Literal["objectness", "score"] = "objectness"
    nms_iou: float = Field(default=0.5, ge=0.0, le=1.0)
    max_detections: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def default_alpha(self) -> "PseudoLabelConfig":
        if self.alpha is None:
            self.alpha = 1.0 if self.label_mode == LabelMode.HARD else 0.5
        if self.alpha == 0.0:
            logger.warning(
                "alpha=0 trains on soft labels only; "
                "student training is known to become unstable")
        return self


class TrainConfig(BaseModel):
    role: Role
    iters_phase1: int = Field(default=3000, ge=0)
    iters_phase2: int = Field(default=1000, ge=0)
    lr_phase1: float = Field(default=0.001, gt=0.0)
    lr_phase2: float = Field(default=0.0001, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0)
    weight_decay: float = Field(default=0.0005, ge=0.0)
    seed: int = 0
    eval_every: int = Field(default=200, ge=1)
    selection: Literal["final", "best"] = "final"
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    grl: GrlConfig | None = None
    pseudo: PseudoLabelConfig | None = None

    @field_validator("grl")
    @classmethod
    def grl_for_teacher_only(cls, grl, info):
        role = info.data.get("role")
        if grl is not None and role is not None and role != Role.TEACHER:
            raise ValueError("a GRL config is only valid for the teacher")
        return grl

    @model_validator(mode="after")
    def check_role_sections(self) -> "TrainConfig":
        # A teacher without a GRL config is trained supervised only.
        if self.pseudo is not None and self.role != Role.STUDENT:
            raise ValueError("a pseudo-label config is only valid "
                             "for the student")
        return self

    @property
    def total_iters(self) -> int:
        return self.iters_phase1 + self.iters_phase2

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 1-based iteration."""
        if iteration <= self.iters_phase1:
            return self.lr_phase1
        return self.lr_phase2


class LossReport(BaseModel):
    det_objectness: float
    det_class: float
    det_box: float
    domain: float | None = None

    @property
    def detection_total(self) -> float:
        return self.det_objectness + self.det_class + self.det_box


class HistoryEntry(BaseModel):
    iteration: int
    lr: float
    losses: LossReport
    lambda_: float | None = Field(default=None, alias="lambda")
    val_map50: float | None = None

    model_config = ConfigDict(populate_by_name=True)


class TrainingHistory(BaseModel):
    role: Role
    entries: list[HistoryEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_increasing(self) -> "TrainingHistory":
        iterations = [entry.iteration for entry in self.entries]
        if any(b <= a for a, b in zip(iterations, iterations[1:])):
            raise ValueError("history iterations must strictly increase")
        return self

    def validation_curve(self) -> list[tuple[int, float]]:
        return [(entry.iteration, entry.val_map50) for entry in self.entries
                if entry.val_map50 is not None]
