import pytest
import numpy as np

from core.audit import audit
from core.config import get_settings
from schemas.detector_model import DetectorConfig, Role, TrainConfig
from schemas.experiment_model import ExperimentConfig, Flags
from schemas.report_model import ApMode, EvalReport, PipelineResult
from schemas.scene_model import (CLASS_NAMES, Annotation, BoundingBox,
                                 DatasetManifest, Domain, ImageRecord,
                                 Sample)
from services.metrics_services import coverage
from services.model_services import build_detector
from services.scenegen_services import generate_scene
from schemas.scenario_presets import ADVERSE_WEATHER, SIM2REAL
from utilis.image_helper import save_png
from utilis.manifest_helper import record_from_annotation, write_manifest

# Small detector used across the suite: stride 8 on 32x32 images.
SMALL_DETECTOR = {"stage_channels": [8, 8, 16, 16],
                  "stage_strides": [1, 2, 2, 2]}


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Point the output root at a temp dir and start with a clean audit."""
    monkeypatch.setenv("UDA_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("UDA_MAX_WORKERS", "2")
    get_settings.cache_clear()
    audit.reset()
    yield
    get_settings.cache_clear()
    audit.reset()


@pytest.fixture
def small_detector_config():
    return DetectorConfig(**SMALL_DETECTOR)


@pytest.fixture
def float64_detector_config():
    return DetectorConfig(**SMALL_DETECTOR, dtype="float64")


@pytest.fixture
def small_detector(small_detector_config):
    return build_detector(small_detector_config, seed=0)


@pytest.fixture
def source_sample():
    return generate_scene(3, SIM2REAL.source, (32, 32), (1, 2))


@pytest.fixture
def target_sample():
    scene = generate_scene(4, SIM2REAL.target, (32, 32), (1, 2))
    return scene.model_copy(update={"domain": Domain.TARGET})


@pytest.fixture
def two_box_sample():
    image = np.full((32, 32, 3), 0.5)
    return Sample(
        image=image,
        annotations=[
            Annotation(box=BoundingBox(x_min=2, y_min=2, x_max=12, y_max=12),
                       class_id=0),
            Annotation(box=BoundingBox(x_min=18, y_min=16, x_max=30,
                                       y_max=28), class_id=2),
        ],
        domain=Domain.SOURCE,
        scene_seed=11,
    )


def write_samples(samples: list[Sample], directory, name: str):
    """Write samples as PNGs plus a manifest; returns the manifest path."""
    manifest = DatasetManifest(info={"split": name})
    annotation_id = 1
    for index, sample in enumerate(samples, start=1):
        file = f"{name}/{index:06d}.png"
        save_png(sample.image, directory / file)
        manifest.images.append(ImageRecord(
            id=index, file=file, width=sample.width, height=sample.height,
            domain=sample.domain, scene_seed=sample.scene_seed))
        for annotation in sample.annotations or []:
            manifest.annotations.append(
                record_from_annotation(annotation, annotation_id, index))
            annotation_id += 1
    path = directory / f"{name}.json"
    write_manifest(manifest, path)
    return path


@pytest.fixture
def scene_manifests(tmp_path):
    """Tiny source, target and validation manifests on disk."""
    source = [generate_scene(seed, SIM2REAL.source, (32, 32), (1, 2))
              for seed in range(4)]
    target = [generate_scene(seed, SIM2REAL.target, (32, 32), (1, 2))
              .model_copy(update={"domain": Domain.TARGET})
              for seed in range(100, 104)]
    val = [generate_scene(seed, SIM2REAL.target, (32, 32), (1, 2))
           .model_copy(update={"domain": Domain.TARGET})
           for seed in range(200, 203)]
    data = tmp_path / "data"
    return {
        "source": write_samples(source, data, "source_train"),
        "target": write_samples(target, data, "target_train"),
        "val": write_samples(val, data, "target_val"),
    }


@pytest.fixture
def tiny_train_config(small_detector_config):
    def make(role: Role, **overrides) -> TrainConfig:
        fields = {"role": role, "iters_phase1": 3, "iters_phase2": 2,
                  "eval_every": 2, "detector": small_detector_config,
                  "seed": 0}
        fields.update(overrides)
        return TrainConfig(**fields)
    return make


@pytest.fixture
def smoke_config(tmp_path):
    """Experiment config small enough for end-to-end pipeline runs."""
    def make(**overrides) -> ExperimentConfig:
        payload = {
            "name": "smoke",
            "scenario": ADVERSE_WEATHER.name,
            "sizes": {"source_train": 3, "target_train": 3, "target_val": 2},
            "image_size": [32, 32],
            "object_count_range": [1, 2],
            "flags": {"img": True, "fea": True, "out": True},
            "pseudo": {"tau": 0.0},
            "training": {"iters_phase1": 2, "iters_phase2": 1,
                         "eval_every": 2, "detector": SMALL_DETECTOR},
            "output_dir": str(tmp_path / "runs"),
            "seed": 0,
        }
        payload.update(overrides)
        return ExperimentConfig.model_validate(payload)
    return make


def eval_report(map50: float) -> EvalReport:
    """Report with the same AP for every class in both modes."""
    per_class = {name: map50 for name in CLASS_NAMES}
    return EvalReport(
        per_class_ap={ApMode.ALLPOINT: per_class, ApMode.VOC11: per_class},
        map50={ApMode.ALLPOINT: map50, ApMode.VOC11: map50},
        detection_count=12, gt_count=6,
        gt_per_class={name: 2 for name in CLASS_NAMES},
    )


@pytest.fixture
def pipeline_result():
    """An adverse-weather result closing 98.22% of the gap."""
    return PipelineResult(
        name="smoke",
        scenario=ADVERSE_WEATHER.name,
        flags=Flags(img=True, fea=True, out=True),
        stages=["translate", "teacher(grl)", "pseudo-label", "student"],
        baseline=eval_report(0.3348),
        adapted=eval_report(0.4731),
        oracle=eval_report(0.4756),
        coverage=coverage(0.3348, 0.4731, 0.4756),
        frechet={"source_target": 1.5, "translated_target": 0.75},
        curves={"baseline": [(2, 0.1), (4, 0.3348)],
                "adapted": [(2, 0.2), (4, 0.4731)],
                "oracle": [(2, 0.25), (4, 0.4756)]},
    )
