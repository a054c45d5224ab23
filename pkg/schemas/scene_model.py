from enum import Enum
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, PrivateAttr,
                      field_validator, model_validator)

CLASS_NAMES: tuple[str, ...] = ("circle", "square", "triangle")

RGB = tuple[float, float, float]


class Provenance(str, Enum):
    GROUND_TRUTH = "ground-truth"
    PSEUDO = "pseudo"


class Domain(str, Enum):
    SOURCE = "source"
    TRANSLATED = "translated"
    TARGET = "target"


class BoundingBox(BaseModel):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def check_corner_order(self) -> "BoundingBox":
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})")
        return self

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def fits(self, width: float, height: float) -> bool:
        """Check the box against image bounds (W, H)."""
        return (0 <= self.x_min and self.x_max <= width
                and 0 <= self.y_min and self.y_max <= height)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, bbox: list[float]) -> "BoundingBox":
        x, y, w, h = bbox
        return cls(x_min=x, y_min=y, x_max=x + w, y_max=y + h)


class Annotation(BaseModel):
    box: BoundingBox
    class_id: int = Field(ge=0, lt=len(CLASS_NAMES))
    provenance: Provenance = Provenance.GROUND_TRUTH
    score: float | None = Field(default=None, ge=0.0, le=1.0)
    class_logits: list[float] | None = None

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def check_provenance_fields(self) -> "Annotation":
        if self.provenance == Provenance.GROUND_TRUTH and (
                self.score is not None or self.class_logits is not None):
            raise ValueError(
                "ground-truth annotations carry no score or logits")
        return self


class Sample(BaseModel):
    """
    One image with its annotations and domain tag.
    ``annotations`` is None when the labels were withheld at load time.
    """
    image: np.ndarray
    annotations: list[Annotation] | None
    domain: Domain
    scene_seed: int

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @field_validator("image")
    @classmethod
    def check_image(cls, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got {image.shape}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        return image

    @model_validator(mode="after")
    def check_boxes_inside(self) -> "Sample":
        for annotation in self.annotations or []:
            if not annotation.box.fits(self.width, self.height):
                raise ValueError(
                    f"box {annotation.box.to_xywh()} outside "
                    f"{self.width}x{self.height} image")
        return self

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


class DomainSpec(BaseModel):
    palette: list[RGB] = Field(min_length=2)
    texture_noise_sigma: float = Field(default=0.0, ge=0.0)
    fog_density: float = Field(default=0.0, ge=0.0)
    gamma: float = Field(default=1.0, gt=0.0)
    white_balance: RGB = (1.0, 1.0, 1.0)
    blur_radius: float = Field(default=0.0, ge=0.0)
    atmospheric_light: float = Field(default=0.9, ge=0.0, le=1.0)

    model_config = ConfigDict(frozen=True)

    @field_validator("palette")
    @classmethod
    def check_palette(cls, palette: list[RGB]) -> list[RGB]:
        for color in palette:
            if any(c < 0.0 or c > 1.0 for c in color):
                raise ValueError(f"palette color {color} outside [0, 1]")
        return palette

    @field_validator("white_balance")
    @classmethod
    def check_gains(cls, gains: RGB) -> RGB:
        if any(g <= 0.0 for g in gains):
            raise ValueError("white balance gains must be positive")
        return gains


class ScenarioSpec(BaseModel):
    name: Literal["sim2real", "adverse-weather", "cross-camera"]
    source: DomainSpec
    target: DomainSpec
    paired: bool = False
    fog_levels: list[float] = Field(default_factory=lambda: [0.6, 1.2, 2.4])

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def check_fog_levels(self) -> "ScenarioSpec":
        if self.paired and not self.fog_levels:
            raise ValueError("paired scenarios need at least one fog level")
        if any(beta < 0 for beta in self.fog_levels):
            raise ValueError("fog levels must be non-negative")
        return self


class DatasetSizes(BaseModel):
    source_train: int = Field(default=200, ge=1)
    target_train: int = Field(default=200, ge=1)
    target_val: int = Field(default=100, ge=1)


class ImageRecord(BaseModel):
    id: int
    file: str
    width: int
    height: int
    domain: Domain
    scene_seed: int
    source_image_id: int | None = None


class AnnotationRecord(BaseModel):
    id: int
    image_id: int
    bbox: list[float] = Field(min_length=4, max_length=4)
    category_id: int
    provenance: Provenance = Provenance.GROUND_TRUTH
    score: float | None = None
    logits: list[float] | None = None


class CategoryRecord(BaseModel):
    id: int
    name: str


def default_categories() -> list[CategoryRecord]:
    return [CategoryRecord(id=i, name=name)
            for i, name in enumerate(CLASS_NAMES)]


class DatasetManifest(BaseModel):
    """
    COCO-style manifest. ``file`` entries are relative to the directory
    holding the manifest JSON.
    """
    images: list[ImageRecord] = Field(default_factory=list)
    annotations: list[AnnotationRecord] = Field(default_factory=list)
    categories: list[CategoryRecord] = Field(
        default_factory=default_categories)
    info: dict = Field(default_factory=dict)

    _root: Path | None = PrivateAttr(default=None)
    _annotations_withheld: bool = PrivateAttr(default=False)

    @property
    def root(self) -> Path | None:
        return self._root

    @property
    def annotations_withheld(self) -> bool:
        return self._annotations_withheld

    def image_path(self, record: ImageRecord) -> Path:
        if self._root is None:
            return Path(record.file)
        return self._root / record.file

    def annotations_by_image(self) -> dict[int, list[AnnotationRecord]]:
        grouped: dict[int, list[AnnotationRecord]] = {
            record.id: [] for record in self.images}
        for annotation in self.annotations:
            grouped.setdefault(annotation.image_id, []).append(annotation)
        return grouped

    def domains(self) -> set[Domain]:
        return {record.domain for record in self.images}
