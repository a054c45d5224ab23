from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from schemas.detector_model import LabelMode
from schemas.experiment_model import Flags
from schemas.style_model import TranslatorMode


class ApMode(str, Enum):
    VOC11 = "voc11"
    ALLPOINT = "allpoint"


class ApResult(BaseModel):
    mode: ApMode
    per_class: dict[int, float | None]
    mean_ap: float | None

    @model_validator(mode="after")
    def check_mean(self) -> "ApResult":
        defined = [ap for ap in self.per_class.values() if ap is not None]
        if any(ap < 0.0 or ap > 1.0 for ap in defined):
            raise ValueError("average precision must lie in [0, 1]")
        expected = float(np.mean(defined)) if defined else None
        if (expected is None) != (self.mean_ap is None) or (
                expected is not None and abs(expected - self.mean_ap) > 1e-12):
            raise ValueError("mAP must be the mean of the defined class APs")
        return self


class EvalReport(BaseModel):
    """
    AP@50 in both interpolation modes. Classes without ground truth have
    an undefined AP (None) and are excluded from the mean.
    """
    per_class_ap: dict[ApMode, dict[str, float | None]]
    map50: dict[ApMode, float | None]
    detection_count: int = Field(ge=0)
    gt_count: int = Field(ge=0)
    gt_per_class: dict[str, int] = Field(default_factory=dict)
    metadata: dict = Field(default_factory=dict)

    def map_for(self, mode: ApMode = ApMode.ALLPOINT) -> float | None:
        return self.map50.get(mode)


class FeatureStats(BaseModel):
    mean: list[float]
    covariance: list[list[float]]
    sample_count: int = Field(ge=1)

    @field_validator("covariance")
    @classmethod
    def check_covariance(cls, cov: list[list[float]]) -> list[list[float]]:
        matrix = np.asarray(cov, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("covariance must be a square matrix")
        if not np.allclose(matrix, matrix.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        if matrix.size and np.linalg.eigvalsh(matrix).min() < -1e-6:
            raise ValueError("covariance must be positive semi-definite")
        return cov

    @model_validator(mode="after")
    def check_dims(self) -> "FeatureStats":
        if len(self.covariance) != len(self.mean):
            raise ValueError("mean and covariance dimensions differ")
        return self

    @property
    def dim(self) -> int:
        return len(self.mean)

    def mean_array(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=np.float64)

    def cov_array(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=np.float64).reshape(
            self.dim, self.dim)


class AblationRow(BaseModel):
    label: str
    img: bool | None = None
    fea: bool | None = None
    out: bool | None = None
    map50: float | None = None
    coverage: float | None = None
    status: Literal["ok", "failed"] = "ok"
    error: str | None = None


class PipelineResult(BaseModel):
    name: str
    scenario: str
    flags: Flags
    stages: list[str] = Field(default_factory=list)
    checkpoints: dict[str, str] = Field(default_factory=dict)
    manifests: dict[str, str] = Field(default_factory=dict)
    baseline: EvalReport
    adapted: EvalReport
    oracle: EvalReport
    coverage: float | None = None
    frechet: dict[str, float | None] = Field(default_factory=dict)
    curves: dict[str, list[tuple[int, float]]] = Field(default_factory=dict)
    pseudo_label_counts: dict[str, int] | None = None


class AblationResult(BaseModel):
    """The 2^3 flag grid plus the oracle row."""
    scenario: str
    rows: list[AblationRow] = Field(default_factory=list)
    results: list[PipelineResult] = Field(default_factory=list)


class SweepRow(BaseModel):
    """
    One pseudo-label setting of a threshold or temperature sweep. The
    student scores are filled only when students were trained.
    """
    label_mode: LabelMode = LabelMode.HARD
    tau: float
    temperature: float | None = None
    alpha: float = 1.0
    kept: int
    student_map50: float | None = None
    student_source_map50: float | None = None


class TranslatorRow(BaseModel):
    """Translator mode measured on one scenario preset."""
    scenario: str
    mode: TranslatorMode
    images: int
    frechet_source_target: float | None = None
    frechet_translated_target: float | None = None
    target_map50: float | None = None
    source_map50: float | None = None
