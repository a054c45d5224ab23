from pathlib import Path
from typing import Literal

from pydantic import (BaseModel, ConfigDict, Field, field_validator,
                      model_validator)

from schemas.detector_model import (DetectorConfig, GrlConfig,
                                    PseudoLabelConfig, Role, TrainConfig)
from schemas.scenario_presets import SCENARIO_PRESETS
from schemas.scene_model import DatasetSizes, ScenarioSpec
from schemas.style_model import TranslatorConfig


class Flags(BaseModel):
    img: bool = False
    fea: bool = False
    out: bool = False

    model_config = ConfigDict(frozen=True)

    @property
    def slug(self) -> str:
        return f"img{int(self.img)}-fea{int(self.fea)}-out{int(self.out)}"

    @property
    def bits(self) -> str:
        return f"{int(self.img)}{int(self.fea)}{int(self.out)}"

    @classmethod
    def parse(cls, bits: str) -> "Flags":
        """Parse a three-digit flag string such as ``"110"``."""
        if len(bits) != 3 or any(b not in "01" for b in bits):
            raise ValueError(f"flags must be three 0/1 digits, got {bits!r}")
        return cls(img=bits[0] == "1", fea=bits[1] == "1",
                   out=bits[2] == "1")


class TrainSchedule(BaseModel):
    """Optimization settings shared by every training role."""
    iters_phase1: int = Field(default=3000, ge=0)
    iters_phase2: int = Field(default=1000, ge=0)
    lr_phase1: float = Field(default=0.001, gt=0.0)
    lr_phase2: float = Field(default=0.0001, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0)
    weight_decay: float = Field(default=0.0005, ge=0.0)
    eval_every: int = Field(default=200, ge=1)
    selection: Literal["final", "best"] = "final"
    detector: DetectorConfig = Field(default_factory=DetectorConfig)


class EvalConfig(BaseModel):
    objectness_floor: float = Field(default=0.001, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.5, ge=0.0, le=1.0)
    iou_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    max_detections: int = Field(default=100, ge=1)
    report_mode: Literal["voc11", "allpoint"] = "allpoint"


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    scenario: ScenarioSpec
    sizes: DatasetSizes = Field(default_factory=DatasetSizes)
    image_size: tuple[int, int] = (64, 64)
    object_count_range: tuple[int, int] = (1, 3)
    flags: Flags = Field(default_factory=Flags)
    translator: TranslatorConfig = Field(default_factory=TranslatorConfig)
    grl: GrlConfig | None = Field(default_factory=GrlConfig)
    pseudo: PseudoLabelConfig | None = Field(
        default_factory=PseudoLabelConfig)
    training: TrainSchedule = Field(default_factory=TrainSchedule)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    threshold_sweep: list[float] = Field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(10)])
    temperature_sweep: list[float] = Field(
        default_factory=lambda: [0.5, 1.0, 1.1, 2.0, 5.0, 10.0, 20.0])
    seed: int = 0
    output_dir: Path | None = None
    generate_missing: bool = True

    @field_validator("scenario", mode="before")
    @classmethod
    def resolve_preset(cls, value):
        if isinstance(value, str):
            if value not in SCENARIO_PRESETS:
                raise ValueError(
                    f"unknown scenario {value!r}; "
                    f"choose from {sorted(SCENARIO_PRESETS)}")
            return SCENARIO_PRESETS[value]
        return value

    @field_validator("threshold_sweep")
    @classmethod
    def thresholds_in_unit_range(cls, values: list[float]) -> list[float]:
        if any(not 0.0 <= value <= 1.0 for value in values):
            raise ValueError(
                f"sweep thresholds must lie in [0, 1], got {values}")
        return values

    @field_validator("temperature_sweep")
    @classmethod
    def temperatures_positive(cls, values: list[float]) -> list[float]:
        if any(value <= 0.0 for value in values):
            raise ValueError(f"sweep temperatures must be > 0, got {values}")
        return values

    @model_validator(mode="after")
    def check_sections(self) -> "ExperimentConfig":
        height, width = self.image_size
        stride = self.training.detector.stride
        if height < 32 or width < 32:
            raise ValueError("image size must be at least 32x32")
        if height % stride or width % stride:
            raise ValueError(
                f"image size {self.image_size} not divisible by "
                f"stride {stride}")
        low, high = self.object_count_range
        if low < 0 or low > high:
            raise ValueError(
                f"invalid object count range {self.object_count_range}")
        if self.flags.fea and self.grl is None:
            raise ValueError("FEA requires a grl section")
        if self.flags.out and self.pseudo is None:
            raise ValueError("OUT requires a pseudo section")
        return self

    def with_flags(self, flags: Flags) -> "ExperimentConfig":
        return self.model_copy(update={"flags": flags})

    def train_config(self, role: Role) -> TrainConfig:
        """
        Role-specific training config built from the shared schedule. The
        teacher gets the GRL section only when FEA is on.
        """
        schedule = self.training.model_dump()
        aligned = role == Role.TEACHER and self.flags.fea
        return TrainConfig(
            role=role,
            seed=self.seed,
            grl=self.grl if aligned else None,
            pseudo=self.pseudo if role == Role.STUDENT else None,
            **schedule,
        )
