from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

RGB = tuple[float, float, float]

# Layout of the per-image statistics vector.
STAT_NAMES: tuple[str, ...] = (
    "mean_r", "mean_g", "mean_b",
    "std_r", "std_g", "std_b",
    "fog_proxy", "gamma_proxy",
)


class TranslatorMode(str, Enum):
    IDENTITY = "identity"
    DETERMINISTIC = "deterministic"
    MULTIMODAL = "multimodal"


class StyleCode(BaseModel):
    channel_means: RGB
    channel_stds: RGB
    fog_beta: float = Field(default=0.0, ge=0.0)
    gamma: float = Field(default=1.0, gt=0.0)

    model_config = ConfigDict(frozen=True)

    @field_validator("channel_means")
    @classmethod
    def check_means(cls, means: RGB) -> RGB:
        if any(m < 0.0 or m > 1.0 for m in means):
            raise ValueError("channel means must lie in [0, 1]")
        return means

    @field_validator("channel_stds")
    @classmethod
    def check_stds(cls, stds: RGB) -> RGB:
        if any(s <= 0.0 for s in stds):
            raise ValueError("channel stds must be positive")
        return stds

    @classmethod
    def neutral(cls) -> "StyleCode":
        return cls(channel_means=(0.5, 0.5, 0.5),
                   channel_stds=(0.25, 0.25, 0.25))


class TranslatorConfig(BaseModel):
    mode: TranslatorMode = TranslatorMode.MULTIMODAL
    styles_per_image: int = Field(default=1, ge=1)
    atmospheric_light: float = Field(default=0.9, gt=0.0, le=1.0)
    top_rows_fraction: float = Field(default=0.25, gt=0.0, le=1.0)


class TranslatorModel(BaseModel):
    """
    Gaussian summary of per-image target statistics, plus the source mean
    the relative fog and gamma terms are measured against.
    """
    mode: TranslatorMode
    target_stat_mean: list[float] = Field(min_length=8, max_length=8)
    target_stat_cov: list[list[float]]
    source_stat_mean: list[float] = Field(min_length=8, max_length=8)
    atmospheric_light: float = 0.9
    top_rows_fraction: float = 0.25
    target_count: int = Field(default=0, ge=0)

    @field_validator("target_stat_cov")
    @classmethod
    def check_cov(cls, cov: list[list[float]]) -> list[list[float]]:
        matrix = np.asarray(cov, dtype=np.float64)
        if matrix.shape != (8, 8):
            raise ValueError(f"covariance must be 8x8, got {matrix.shape}")
        if not np.allclose(matrix, matrix.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(matrix).min() < -1e-8:
            raise ValueError("covariance must be positive semi-definite")
        return cov

    def mean_vector(self) -> np.ndarray:
        return np.asarray(self.target_stat_mean, dtype=np.float64)

    def cov_matrix(self) -> np.ndarray:
        return np.asarray(self.target_stat_cov, dtype=np.float64)
