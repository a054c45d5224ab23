import hashlib
import json
import os
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ValidationError

from core.audit import audit
from core.exceptions import DataError, ManifestNotFoundError
from schemas.scene_model import (Annotation, AnnotationRecord, BoundingBox,
                                 DatasetManifest, ImageRecord, Provenance,
                                 Sample)
from utilis.image_helper import load_png


def content_hash(payload: Any) -> str:
    """
    sha256 of a canonical JSON rendering. Pydantic models are dumped in
    JSON mode first.
    """
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json", by_alias=True)
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json", by_alias=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ManifestNotFoundError(f"{path} does not exist") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}") from e


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    """
    Write a manifest as COCO-style JSON. Optional annotation fields are
    omitted when unset.
    """
    payload = {
        "images": [record.model_dump(mode="json", exclude_none=True)
                   for record in manifest.images],
        "annotations": [record.model_dump(mode="json", exclude_none=True)
                        for record in manifest.annotations],
        "categories": [record.model_dump(mode="json")
                       for record in manifest.categories],
        "info": manifest.info,
    }
    write_json(path, payload)


def load_manifest(path: Path, include_annotations: bool) -> DatasetManifest:
    """
    Load a manifest and record the access with the annotation audit.
    Args:
        path (Path): Manifest JSON file.
        include_annotations (bool): When False the annotation list is
            dropped and the manifest is marked as withheld.
    Returns:
        DatasetManifest: The manifest, resolving files against its directory.
    Raises:
        ManifestNotFoundError: If the file does not exist.
        DataError: If the file is not a valid manifest.
    """
    payload = read_json(path)
    try:
        manifest = DatasetManifest.model_validate(payload)
    except ValidationError as e:
        raise DataError(f"invalid manifest {path}: {e}") from e
    if not include_annotations:
        manifest.annotations = []
    manifest._root = path.parent
    manifest._annotations_withheld = not include_annotations
    domain_of = {record.id: record.domain.value for record in manifest.images}
    audit.record(
        path=str(path),
        domains=list(domain_of.values()),
        annotations_read=include_annotations,
        provenances=[record.provenance.value
                     for record in manifest.annotations],
        ground_truth_domains=[
            domain_of.get(record.image_id, "unknown")
            for record in manifest.annotations
            if record.provenance == Provenance.GROUND_TRUTH],
    )
    return manifest


def annotation_from_record(record: AnnotationRecord) -> Annotation:
    return Annotation(
        box=BoundingBox.from_xywh(record.bbox),
        class_id=record.category_id,
        provenance=record.provenance,
        score=record.score,
        class_logits=record.logits,
    )


def record_from_annotation(annotation: Annotation, annotation_id: int,
                           image_id: int) -> AnnotationRecord:
    return AnnotationRecord(
        id=annotation_id,
        image_id=image_id,
        bbox=annotation.box.to_xywh(),
        category_id=annotation.class_id,
        provenance=annotation.provenance,
        score=annotation.score,
        logits=annotation.class_logits,
    )


def load_sample(manifest: DatasetManifest, record: ImageRecord,
                grouped: dict[int, list[AnnotationRecord]] | None = None
                ) -> Sample:
    """
    Read one image of a manifest. Annotations are None when the manifest
    was loaded with labels withheld.
    """
    image = load_png(manifest.image_path(record))
    annotations = None
    if not manifest.annotations_withheld:
        if grouped is None:
            grouped = manifest.annotations_by_image()
        annotations = [annotation_from_record(r)
                       for r in grouped.get(record.id, [])]
    try:
        return Sample(image=image, annotations=annotations,
                      domain=record.domain, scene_seed=record.scene_seed)
    except ValidationError as e:
        raise DataError(
            f"image {record.file} violates sample invariants: {e}") from e


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    grouped = manifest.annotations_by_image()
    return [load_sample(manifest, record, grouped)
            for record in manifest.images]


def relative_file(image_path: Path, manifest_dir: Path) -> str:
    return Path(os.path.relpath(image_path, manifest_dir)).as_posix()


def concatenate_manifests(manifests: list[DatasetManifest],
                          manifest_dir: Path) -> DatasetManifest:
    """
    Join manifests into one with image and annotation ids re-keyed from 1.
    File paths are rewritten relative to ``manifest_dir``.
    """
    joint = DatasetManifest()
    next_image_id = 1
    next_annotation_id = 1
    for manifest in manifests:
        grouped = manifest.annotations_by_image()
        for record in manifest.images:
            new_record = record.model_copy(update={
                "id": next_image_id,
                "file": relative_file(manifest.image_path(record).resolve(),
                                      manifest_dir.resolve()),
            })
            joint.images.append(new_record)
            for annotation in grouped.get(record.id, []):
                joint.annotations.append(annotation.model_copy(update={
                    "id": next_annotation_id,
                    "image_id": next_image_id,
                }))
                next_annotation_id += 1
            next_image_id += 1
    joint._root = manifest_dir
    return joint


def provenance_histogram(manifest: DatasetManifest) -> dict[str, int]:
    histogram = {provenance.value: 0 for provenance in Provenance}
    for annotation in manifest.annotations:
        histogram[annotation.provenance.value] += 1
    return histogram
