import asyncio
import math
from pathlib import Path

import numpy as np
from loguru import logger

from core.config import get_settings
from core.exceptions import ConfigurationError, DataError
from schemas.scene_model import DatasetManifest, Domain, Sample
from schemas.style_model import (StyleCode, TranslatorConfig,
                                 TranslatorMode, TranslatorModel)
from services.scenegen_services import depth_proxy, write_split
from utilis.image_helper import load_png
from utilis.manifest_helper import load_sample

MAX_STYLE_REJECTS = 100
GAMMA_RATIO_RANGE = (0.25, 4.0)
MIN_TRANSMITTANCE = 1e-3
# Luminance weights of the gamma proxy.
LUMA = np.array([0.299, 0.587, 0.114])


def top_rows(height: int, fraction: float) -> int:
    return max(1, int(math.ceil(height * fraction)))


def image_statistics(image: np.ndarray,
                     top_rows_fraction: float = 0.25) -> np.ndarray:
    """
    Per-image statistics vector: channel means, channel stds, the mean
    brightness of the top rows (fog proxy) and ln(mean luminance)/ln(0.5)
    (gamma proxy, 1 for a mid-gray image).
    """
    means = image.mean(axis=(0, 1))
    stds = image.std(axis=(0, 1))
    fog = image[:top_rows(image.shape[0], top_rows_fraction)].mean()
    luminance = float(np.clip((image @ LUMA).mean(), 1e-6, 1 - 1e-6))
    gamma = math.log(luminance) / math.log(0.5)
    return np.concatenate([means, stds, [fog, gamma]])


def _manifest_statistics(manifest: DatasetManifest,
                         top_rows_fraction: float) -> np.ndarray:
    return np.stack([
        image_statistics(load_png(manifest.image_path(record)),
                         top_rows_fraction)
        for record in manifest.images])


def fit_translator(source_manifest: DatasetManifest,
                   target_manifest: DatasetManifest,
                   config: TranslatorConfig | None = None) -> TranslatorModel:
    """
    Fit the Gaussian style model of the target domain. Only image files are
    read; annotations of either manifest are never touched.
    Args:
        source_manifest (DatasetManifest): Source images.
        target_manifest (DatasetManifest): Target images.
        config (TranslatorConfig | None): Mode and fog constants.
    Returns:
        TranslatorModel: Target statistics mean and covariance.
    Raises:
        ConfigurationError: If either manifest is empty.
    """
    config = config or TranslatorConfig()
    if not source_manifest.images or not target_manifest.images:
        raise ConfigurationError("translator fit needs nonempty source and "
                                 "target manifests")
    source_stats = _manifest_statistics(source_manifest,
                                        config.top_rows_fraction)
    target_stats = _manifest_statistics(target_manifest,
                                        config.top_rows_fraction)
    if len(target_stats) > 1:
        cov = np.cov(target_stats, rowvar=False, ddof=1)
        cov = (cov + cov.T) / 2
    else:
        cov = np.zeros((target_stats.shape[1], target_stats.shape[1]))
    logger.info(f"Fitted {config.mode.value} translator on "
                f"{len(target_stats)} target images")
    return TranslatorModel(
        mode=config.mode,
        target_stat_mean=target_stats.mean(axis=0).tolist(),
        target_stat_cov=cov.tolist(),
        source_stat_mean=source_stats.mean(axis=0).tolist(),
        atmospheric_light=config.atmospheric_light,
        top_rows_fraction=config.top_rows_fraction,
        target_count=len(target_stats),
    )


def _valid_stats(stats: np.ndarray) -> bool:
    return bool(np.all((stats[:3] >= 0) & (stats[:3] <= 1))
                and np.all(stats[3:6] > 0)
                and 0 <= stats[6] <= 1
                and stats[7] > 0)


def _clip_stats(stats: np.ndarray) -> np.ndarray:
    clipped = stats.copy()
    clipped[:3] = np.clip(clipped[:3], 0.0, 1.0)
    clipped[3:6] = np.maximum(clipped[3:6], 1e-3)
    clipped[6] = np.clip(clipped[6], 0.0, 1.0)
    clipped[7] = max(clipped[7], 1e-3)
    return clipped


def style_from_stats(model: TranslatorModel, stats: np.ndarray) -> StyleCode:
    """
    Turn a statistics vector into a style. Gamma and fog are expressed
    relative to the fitted source statistics.
    """
    source = np.asarray(model.source_stat_mean)
    gamma = 1.0
    if source[7] > 0 and stats[7] > 0:
        gamma = float(np.clip(stats[7] / source[7], *GAMMA_RATIO_RANGE))

    light = model.atmospheric_light
    fog_target, fog_source = float(stats[6]), float(source[6])
    beta = 0.0
    if fog_target > fog_source and fog_source < light:
        transmittance = min(max((light - fog_target) / (light - fog_source),
                                MIN_TRANSMITTANCE), 1.0)
        # Mean depth of the top rows the fog proxy is measured on.
        top_depth = 1.0 - model.top_rows_fraction / 2
        beta = -math.log(transmittance) / top_depth
    return StyleCode(
        channel_means=tuple(float(m) for m in np.clip(stats[:3], 0.0, 1.0)),
        channel_stds=tuple(float(s) for s in np.maximum(stats[3:6], 1e-6)),
        fog_beta=max(beta, 0.0),
        gamma=gamma,
    )


def sample_style(model: TranslatorModel, seed: int) -> StyleCode:
    """
    Draw one style.
    Multimodal draws from the fitted Gaussian, rejecting draws outside the
    valid ranges and clipping after ``MAX_STYLE_REJECTS`` rejections;
    deterministic returns the mean style; identity returns a neutral one.
    """
    if model.mode == TranslatorMode.IDENTITY:
        return StyleCode.neutral()
    mean = model.mean_vector()
    if model.mode == TranslatorMode.DETERMINISTIC:
        return style_from_stats(model, mean)

    rng = np.random.default_rng(seed)
    cov = model.cov_matrix()
    for _ in range(MAX_STYLE_REJECTS):
        draw = rng.multivariate_normal(mean, cov, method="eigh")
        if _valid_stats(draw):
            return style_from_stats(model, draw)
    logger.warning(f"Style seed {seed} rejected {MAX_STYLE_REJECTS} draws, "
                   "clipping the last one")
    return style_from_stats(model, _clip_stats(draw))


def _renormalize(image: np.ndarray, style: StyleCode) -> np.ndarray:
    out = np.empty_like(image)
    for channel in range(3):
        values = image[:, :, channel]
        std = values.std()
        if std > 0:
            out[:, :, channel] = ((values - values.mean()) / std
                                  * style.channel_stds[channel]
                                  + style.channel_means[channel])
        else:
            out[:, :, channel] = style.channel_means[channel]
    return out


def translate(model: TranslatorModel, sample: Sample,
              style: StyleCode) -> Sample:
    """
    Restyle a source sample: gamma, then fog, then per-channel
    renormalization to the style's mean and std, then clipping.
    Args:
        model (TranslatorModel): Fitted translator.
        sample (Sample): Source-domain sample.
        style (StyleCode): Appearance to apply.
    Returns:
        Sample: The translated sample with the input annotations.
    Raises:
        DataError: If the sample is not from the source domain.
    """
    if sample.domain != Domain.SOURCE:
        raise DataError(f"only source samples can be translated, "
                        f"got {sample.domain.value}")
    update = {"domain": Domain.TRANSLATED}
    if model.mode == TranslatorMode.IDENTITY:
        return sample.model_copy(update={**update,
                                         "image": sample.image.copy()})
    image = sample.image ** style.gamma
    if style.fog_beta > 0:
        transmittance = np.exp(
            -style.fog_beta * depth_proxy(sample.height))[:, None, None]
        image = (image * transmittance
                 + model.atmospheric_light * (1.0 - transmittance))
    image = np.clip(_renormalize(image, style), 0.0, 1.0)
    return sample.model_copy(update={**update, "image": image})


def style_seed(seed: int, image_id: int, style_index: int) -> int:
    sequence = np.random.SeedSequence([seed, image_id, style_index])
    return int(sequence.generate_state(1)[0])


async def translate_dataset(model: TranslatorModel,
                            source_manifest: DatasetManifest,
                            styles_per_image: int, seed: int,
                            out_dir: Path,
                            split: str = "translated") -> DatasetManifest:
    """
    Translate every source image ``styles_per_image`` times.
    Args:
        model (TranslatorModel): Fitted translator.
        source_manifest (DatasetManifest): Labeled source manifest.
        styles_per_image (int): Styles drawn per source image, >= 1.
        seed (int): Base seed of the style draws.
        out_dir (Path): Directory receiving the manifest and PNGs.
        split (str): Name of the written split.
    Returns:
        DatasetManifest: Translated manifest; each record carries its
            source image id and the source annotations.
    Raises:
        ConfigurationError: If ``styles_per_image`` < 1.
    """
    if styles_per_image < 1:
        raise ConfigurationError(
            f"styles_per_image must be >= 1, got {styles_per_image}")
    grouped = source_manifest.annotations_by_image()
    semaphore = asyncio.Semaphore(get_settings().max_workers)
    jobs = [(record, k) for record in source_manifest.images
            for k in range(styles_per_image)]

    def translate_one(record, style_index: int) -> Sample:
        sample = load_sample(source_manifest, record, grouped)
        style = sample_style(model, style_seed(seed, record.id, style_index))
        return translate(model, sample, style)

    async def run(record, style_index: int) -> Sample:
        async with semaphore:
            return await asyncio.to_thread(translate_one, record, style_index)

    samples = await asyncio.gather(*[run(record, k) for record, k in jobs])
    manifest = await write_split(
        list(samples), split, out_dir,
        source_ids=[record.id for record, _ in jobs],
        info={"translator_mode": model.mode.value,
              "styles_per_image": styles_per_image})
    logger.info(f"Translated {len(source_manifest.images)} images into "
                f"{len(samples)} with {styles_per_image} styles each")
    return manifest
