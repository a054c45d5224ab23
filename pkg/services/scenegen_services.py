import asyncio
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel
from scipy.ndimage import gaussian_filter

from core.config import get_settings
from core.exceptions import ConfigurationError, InternalInvariantError
from schemas.scene_model import (Annotation, BoundingBox, CLASS_NAMES,
                                 DatasetManifest, DatasetSizes, Domain,
                                 DomainSpec, ImageRecord, Sample,
                                 ScenarioSpec)
from utilis.image_helper import save_png
from utilis.manifest_helper import (record_from_annotation, write_json,
                                    write_manifest)

SUPERSAMPLE = 2
# Object extent as a fraction of the shorter image side.
OBJECT_SIZE_RANGE = (0.22, 0.38)
PLACEMENT_ATTEMPTS = 100
# Scene seeds of one split live in [base + offset, base + offset + SPLIT_SPAN).
SPLIT_SPAN = 300_000
SPLIT_OFFSETS = {"source_train": 0, "target_train": 1, "target_val": 2}


class DatasetPaths(BaseModel):
    source_train: Path
    target_train: Path
    target_val: Path
    source_val: Path


def _render_shape(class_id: int, cx: float, cy: float, size: float,
                  height: int, width: int) -> np.ndarray:
    """Boolean mask of one shape on the supersampled grid."""
    ys = (np.arange(height * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(width * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    half = size / 2
    name = CLASS_NAMES[class_id]
    if name == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    if name == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # Upright isosceles triangle with base and height equal to size.
    top = cy - half
    rel = (yy - top) / size
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * half)


def _mask_box(mask: np.ndarray) -> BoundingBox:
    """Tight box of a supersampled mask, in image pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(
        x_min=cols[0] / SUPERSAMPLE,
        y_min=rows[0] / SUPERSAMPLE,
        x_max=(cols[-1] + 1) / SUPERSAMPLE,
        y_max=(rows[-1] + 1) / SUPERSAMPLE,
    )


def _coverage(mask: np.ndarray) -> np.ndarray:
    """Average a supersampled mask down to per-pixel coverage."""
    h, w = mask.shape[0] // SUPERSAMPLE, mask.shape[1] // SUPERSAMPLE
    return mask.reshape(h, SUPERSAMPLE, w, SUPERSAMPLE).mean(axis=(1, 3))


def _overlaps(box: BoundingBox, placed: list[BoundingBox]) -> bool:
    return any(box.x_min < other.x_max and other.x_min < box.x_max
               and box.y_min < other.y_max and other.y_min < box.y_max
               for other in placed)


def depth_proxy(height: int) -> np.ndarray:
    """
    Per-row depth in [0, 1], counted from the bottom edge: the bottom row
    is nearest (0) and the top row, the horizon, farthest (1). This is
    the row index flipped, d = (H - 1 - row) / (H - 1), so fog is densest
    at the top of the image where the translator measures it.
    """
    if height == 1:
        return np.zeros(1)
    rows = np.arange(height, dtype=np.float64)
    return (height - 1 - rows) / (height - 1)


def apply_fog(sample: Sample, beta: float,
              atmospheric_light: float) -> Sample:
    """
    Atmospheric scattering I' = I*t + A*(1 - t) with t = exp(-beta * d).
    Args:
        sample (Sample): Input sample, pixels in [0, 1].
        beta (float): Scattering coefficient, >= 0.
        atmospheric_light (float): Airlight A in [0, 1].
    Returns:
        Sample: A fogged copy; annotations are returned unchanged.
    Raises:
        ConfigurationError: If beta is negative or A lies outside [0, 1].
    """
    if beta < 0:
        raise ConfigurationError(f"fog beta must be >= 0, got {beta}")
    if not 0.0 <= atmospheric_light <= 1.0:
        raise ConfigurationError(
            f"atmospheric light must lie in [0, 1], got {atmospheric_light}")
    if beta == 0:
        return sample.model_copy(update={"image": sample.image.copy()})
    transmittance = np.exp(-beta * depth_proxy(sample.height))[:, None, None]
    fogged = (sample.image * transmittance
              + atmospheric_light * (1.0 - transmittance))
    return sample.model_copy(update={"image": np.clip(fogged, 0.0, 1.0)})


def _apply_appearance(image: np.ndarray, spec: DomainSpec) -> np.ndarray:
    image = image * np.asarray(spec.white_balance)[None, None, :]
    image = np.clip(image, 0.0, 1.0) ** spec.gamma
    if spec.blur_radius > 0:
        image = gaussian_filter(image, sigma=(spec.blur_radius,
                                              spec.blur_radius, 0))
    return np.clip(image, 0.0, 1.0)


def generate_scene(seed: int, spec: DomainSpec,
                   size: tuple[int, int] = (64, 64),
                   object_count_range: tuple[int, int] = (1, 3)) -> Sample:
    """
    Render one scene of shapes with exact ground-truth boxes.
    Geometry depends on the seed only; appearance on the seed and the
    domain spec, so two domains rendered with one seed share their layout.
    Args:
        seed (int): Scene seed.
        spec (DomainSpec): Appearance parameters of the domain.
        size (tuple[int, int]): Image (H, W), both >= 32.
        object_count_range (tuple[int, int]): Inclusive (min, max) count.
    Returns:
        Sample: The rendered source-domain sample.
    Raises:
        ConfigurationError: If the size or count range is invalid.
    """
    height, width = size
    low, high = object_count_range
    if height < 32 or width < 32:
        raise ConfigurationError(f"image size must be >= 32x32, got {size}")
    if low < 0 or low > high:
        raise ConfigurationError(
            f"invalid object count range {object_count_range}")

    geometry = np.random.default_rng([seed, 0])
    texture = np.random.default_rng([seed, 1])

    background = np.asarray(spec.palette[0], dtype=np.float64)
    image = np.broadcast_to(background, (height, width, 3)).copy()
    if spec.texture_noise_sigma > 0:
        image += texture.normal(0.0, spec.texture_noise_sigma, image.shape)

    count = int(geometry.integers(low, high + 1))
    shorter = min(height, width)
    annotations: list[Annotation] = []
    placed: list[BoundingBox] = []
    for _ in range(count):
        class_id = int(geometry.integers(len(CLASS_NAMES)))
        color_index = int(geometry.integers(1, 1 << 16))
        for attempt in range(PLACEMENT_ATTEMPTS):
            object_size = geometry.uniform(*OBJECT_SIZE_RANGE) * shorter
            half = object_size / 2
            cx = geometry.uniform(half + 1, width - half - 1)
            cy = geometry.uniform(half + 1, height - half - 1)
            mask = _render_shape(class_id, cx, cy, object_size,
                                 height, width)
            box = _mask_box(mask)
            if not _overlaps(box, placed):
                break
        # After the last attempt the object is kept even if it overlaps.
        placed.append(box)
        color = np.asarray(
            spec.palette[1 + color_index % (len(spec.palette) - 1)])
        alpha = _coverage(mask)[:, :, None]
        shade = color + texture.normal(
            0.0, spec.texture_noise_sigma, image.shape) \
            if spec.texture_noise_sigma > 0 else color
        image = image * (1.0 - alpha) + shade * alpha
        annotations.append(Annotation(box=box, class_id=class_id))

    image = _apply_appearance(np.clip(image, 0.0, 1.0), spec)
    sample = Sample(image=image, annotations=annotations,
                    domain=Domain.SOURCE, scene_seed=seed)
    if spec.fog_density > 0:
        sample = apply_fog(sample, spec.fog_density, spec.atmospheric_light)
    return sample


def split_seeds(base_seed: int, split: str, count: int) -> list[int]:
    if count > SPLIT_SPAN:
        raise ConfigurationError(
            f"split {split} larger than {SPLIT_SPAN} scenes")
    start = base_seed * 3 * SPLIT_SPAN + SPLIT_OFFSETS[split] * SPLIT_SPAN
    return list(range(start, start + count))


def _check_disjoint(seed_sets: dict[str, list[int]], paired: bool) -> None:
    names = list(seed_sets)
    for i, first in enumerate(names):
        for second in names[i + 1:]:
            if paired and {first, second} == {"source_train", "target_train"}:
                continue
            if set(seed_sets[first]) & set(seed_sets[second]):
                raise InternalInvariantError(
                    f"scene seeds of {first} and {second} overlap")


async def write_split(samples: list[Sample], split: str, out_dir: Path,
                      source_ids: list[int | None] | None = None,
                      info: dict | None = None) -> DatasetManifest:
    """Write PNGs concurrently and return the split manifest."""
    settings = get_settings()
    semaphore = asyncio.Semaphore(settings.max_workers)
    files = [f"{split}/{index + 1:06d}.png" for index in range(len(samples))]

    async def write_one(sample: Sample, file: str) -> None:
        async with semaphore:
            await asyncio.to_thread(save_png, sample.image, out_dir / file)

    await asyncio.gather(*[write_one(sample, file)
                           for sample, file in zip(samples, files)])

    manifest = DatasetManifest(info={"split": split, **(info or {})})
    annotation_id = 1
    for index, (sample, file) in enumerate(zip(samples, files)):
        image_id = index + 1
        manifest.images.append(ImageRecord(
            id=image_id, file=file, width=sample.width, height=sample.height,
            domain=sample.domain, scene_seed=sample.scene_seed,
            source_image_id=source_ids[index] if source_ids else None,
        ))
        for annotation in sample.annotations or []:
            manifest.annotations.append(
                record_from_annotation(annotation, annotation_id, image_id))
            annotation_id += 1
    write_manifest(manifest, out_dir / f"{split}.json")
    manifest._root = out_dir
    return manifest


async def _render_many(seeds: list[int], spec: DomainSpec,
                       size: tuple[int, int],
                       object_count_range: tuple[int, int]) -> list[Sample]:
    semaphore = asyncio.Semaphore(get_settings().max_workers)

    async def render(seed: int) -> Sample:
        async with semaphore:
            return await asyncio.to_thread(
                generate_scene, seed, spec, size, object_count_range)

    return list(await asyncio.gather(*[render(seed) for seed in seeds]))


def _as_target(sample: Sample) -> Sample:
    return sample.model_copy(update={"domain": Domain.TARGET})


async def generate_dataset(scenario: ScenarioSpec, sizes: DatasetSizes,
                           seed: int, out_dir: Path,
                           size: tuple[int, int] = (64, 64),
                           object_count_range: tuple[int, int] = (1, 3)
                           ) -> DatasetPaths:
    """
    Generate the source_train, target_train, target_val and source_val
    splits. source_val renders the target_val scene seeds in the source
    domain, so source and target validation share their layouts.
    Paired scenarios fog every source scene at each fog level, so the
    target training set holds source_train x len(fog_levels) images whose
    annotations equal their source scene's. Target annotations stay on disk
    and are withheld at load time from non-oracle consumers.
    Args:
        scenario (ScenarioSpec): Source/target domains and pairing.
        sizes (DatasetSizes): Split sizes.
        seed (int): Base seed of all scene seeds.
        out_dir (Path): Directory receiving manifests and PNGs.
    Returns:
        DatasetPaths: Paths of the four manifests.
    Raises:
        InternalInvariantError: If split seeds overlap.
    """
    seeds = {
        "source_train": split_seeds(seed, "source_train", sizes.source_train),
        "target_train": split_seeds(seed, "target_train", sizes.target_train),
        "target_val": split_seeds(seed, "target_val", sizes.target_val),
    }
    if scenario.paired:
        seeds["target_train"] = seeds["source_train"]
    _check_disjoint(seeds, scenario.paired)

    logger.info(f"Generating {scenario.name} data into {out_dir}")
    source = await _render_many(seeds["source_train"], scenario.source,
                                size, object_count_range)
    source_manifest = await write_split(source, "source_train", out_dir)

    target_light = scenario.target.atmospheric_light
    source_val = await _render_many(seeds["target_val"], scenario.source,
                                   size, object_count_range)
    source_ids: list[int | None] | None = None
    if scenario.paired:
        target_train, source_ids = [], []
        for record, sample in zip(source_manifest.images, source):
            for beta in scenario.fog_levels:
                target_train.append(
                    _as_target(apply_fog(sample, beta, target_light)))
                source_ids.append(record.id)
        target_val = [
            _as_target(apply_fog(
                sample,
                scenario.fog_levels[i % len(scenario.fog_levels)],
                target_light))
            for i, sample in enumerate(source_val)]
    else:
        target_train = [_as_target(s) for s in await _render_many(
            seeds["target_train"], scenario.target, size, object_count_range)]
        target_val = [_as_target(s) for s in await _render_many(
            seeds["target_val"], scenario.target, size, object_count_range)]

    await write_split(target_train, "target_train", out_dir, source_ids)
    await write_split(target_val, "target_val", out_dir)
    await write_split(source_val, "source_val", out_dir)
    paths = DatasetPaths(
        source_train=out_dir / "source_train.json",
        target_train=out_dir / "target_train.json",
        target_val=out_dir / "target_val.json",
        source_val=out_dir / "source_val.json",
    )
    write_json(out_dir / "datasets.json", paths)
    logger.info(
        f"Wrote {len(source)} source, {len(target_train)} target train, "
        f"{len(target_val)} target val and {len(source_val)} source val "
        f"images")
    return paths
