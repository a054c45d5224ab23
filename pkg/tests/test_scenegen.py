import json

import numpy as np
import pytest

from core.exceptions import ConfigurationError, InternalInvariantError
from schemas.scene_model import (Annotation, BoundingBox, DatasetSizes,
                                 Domain, DomainSpec, Sample)
from schemas.scenario_presets import (ADVERSE_WEATHER, CROSS_CAMERA,
                                      SCENARIO_PRESETS, SIM2REAL)
from services.scenegen_services import (OBJECT_SIZE_RANGE,
                                        PLACEMENT_ATTEMPTS, _check_disjoint,
                                        _coverage, _mask_box, _overlaps,
                                        _render_shape, apply_fog,
                                        depth_proxy, generate_dataset,
                                        generate_scene, split_seeds)
from utilis.manifest_helper import load_manifest


def _flat_sample(value: float, height: int = 32, width: int = 32) -> Sample:
    return Sample(image=np.full((height, width, 3), value), annotations=[],
                  domain=Domain.SOURCE, scene_seed=0)


class TestGenerateScene:
    def test_same_seed_is_bit_identical(self):
        first = generate_scene(7, SIM2REAL.source)
        second = generate_scene(7, SIM2REAL.source)
        assert np.array_equal(first.image, second.image)
        assert first.annotations == second.annotations

    def test_zero_objects(self):
        sample = generate_scene(5, SIM2REAL.source, (64, 64), (0, 0))
        assert sample.annotations == []

    def test_boxes_inside_image_and_count_in_range(self):
        sample = generate_scene(3, SIM2REAL.source, (64, 64), (1, 3))
        assert 1 <= len(sample.annotations) <= 3
        for annotation in sample.annotations:
            assert annotation.box.fits(64, 64)

    def test_boxes_match_rendered_masks(self):
        """Re-render every object's mask with the same draws and compare."""
        seed, height, width = 3, 64, 64
        sample = generate_scene(seed, SIM2REAL.source, (height, width),
                                (1, 3))
        geometry = np.random.default_rng([seed, 0])
        count = int(geometry.integers(1, 4))
        assert count == len(sample.annotations)
        placed = []
        for annotation in sample.annotations:
            class_id = int(geometry.integers(3))
            geometry.integers(1, 1 << 16)
            for _ in range(PLACEMENT_ATTEMPTS):
                size = geometry.uniform(*OBJECT_SIZE_RANGE) * 64
                cx = geometry.uniform(size / 2 + 1, width - size / 2 - 1)
                cy = geometry.uniform(size / 2 + 1, height - size / 2 - 1)
                mask = _render_shape(class_id, cx, cy, size, height, width)
                if not _overlaps(_mask_box(mask), placed):
                    break
            placed.append(_mask_box(mask))
            assert annotation.class_id == class_id
            pixels = _coverage(mask) > 0
            rows = np.flatnonzero(pixels.any(axis=1))
            cols = np.flatnonzero(pixels.any(axis=0))
            box = annotation.box
            assert abs(box.x_min - cols[0]) <= 1.0
            assert abs(box.x_max - (cols[-1] + 1)) <= 1.0
            assert abs(box.y_min - rows[0]) <= 1.0
            assert abs(box.y_max - (rows[-1] + 1)) <= 1.0

    def test_mask_box_is_tight(self):
        mask = np.zeros((64, 64), dtype=bool)
        mask[10:20, 4:30] = True
        box = _mask_box(mask)
        assert box == BoundingBox(x_min=2.0, y_min=5.0, x_max=15.0,
                                  y_max=10.0)

    def test_shared_seed_shares_layout_across_domains(self):
        source = generate_scene(9, SIM2REAL.source)
        target = generate_scene(9, SIM2REAL.target)
        assert source.annotations == target.annotations
        assert not np.array_equal(source.image, target.image)

    def test_pixels_in_unit_range(self):
        for spec in (SIM2REAL.target, CROSS_CAMERA.target,
                     ADVERSE_WEATHER.target):
            sample = generate_scene(1, spec)
            assert sample.image.min() >= 0.0
            assert sample.image.max() <= 1.0

    def test_rejects_small_images(self):
        with pytest.raises(ConfigurationError):
            generate_scene(0, SIM2REAL.source, (16, 64))

    def test_rejects_bad_count_range(self):
        with pytest.raises(ConfigurationError):
            generate_scene(0, SIM2REAL.source, (64, 64), (3, 1))

    def test_box_validity_over_corpus(self):
        for seed in range(200):
            sample = generate_scene(seed, CROSS_CAMERA.source, (32, 32),
                                    (0, 3))
            for annotation in sample.annotations:
                box = annotation.box
                assert 0 <= box.x_min < box.x_max <= 32
                assert 0 <= box.y_min < box.y_max <= 32


class TestApplyFog:
    def test_zero_beta_is_identity(self, source_sample):
        fogged = apply_fog(source_sample, 0.0, 0.8)
        assert np.array_equal(fogged.image, source_sample.image)
        assert fogged.image is not source_sample.image

    def test_large_beta_approaches_airlight(self):
        fogged = apply_fog(_flat_sample(0.2), 2000.0, 0.8)
        # The bottom row has depth 0 and is never fogged.
        assert np.allclose(fogged.image[:-1], 0.8, atol=1e-6)

    def test_direct_formula(self):
        height = 3
        sample = _flat_sample(0.2, height=height, width=32)
        # Middle row has depth 0.5; beta = 2 ln 2 gives t = 0.5 there.
        fogged = apply_fog(sample, 2 * np.log(2.0), 0.8)
        assert fogged.image[1, 0, 0] == pytest.approx(0.5)

    def test_depth_counts_from_bottom(self):
        depth = depth_proxy(5)
        assert depth[0] == 1.0
        assert depth[-1] == 0.0
        assert np.all(np.diff(depth) < 0)

    def test_fog_is_densest_at_the_top_edge(self):
        fogged = apply_fog(_flat_sample(0.2, height=8), 1.0, 0.8)
        assert fogged.image[-1, 0, 0] == 0.2
        assert fogged.image[0, 0, 0] > fogged.image[4, 0, 0] > 0.2

    def test_preserves_annotations(self, two_box_sample):
        for beta in (0.0, 0.3, 1.2, 5.0):
            fogged = apply_fog(two_box_sample, beta, 0.9)
            assert fogged.annotations == two_box_sample.annotations

    def test_rejects_negative_beta(self, source_sample):
        with pytest.raises(ConfigurationError):
            apply_fog(source_sample, -0.1, 0.8)

    def test_rejects_airlight_out_of_range(self, source_sample):
        with pytest.raises(ConfigurationError):
            apply_fog(source_sample, 1.0, 1.5)


class TestSplitSeeds:
    def test_splits_are_disjoint(self):
        seeds = {split: split_seeds(4, split, 50)
                 for split in ("source_train", "target_train", "target_val")}
        _check_disjoint(seeds, paired=False)

    def test_overlap_is_an_internal_error(self):
        seeds = {"source_train": [1, 2], "target_val": [2, 3]}
        with pytest.raises(InternalInvariantError):
            _check_disjoint(seeds, paired=False)

    def test_paired_train_splits_may_share(self):
        seeds = {"source_train": [1, 2], "target_train": [1, 2],
                 "target_val": [5]}
        _check_disjoint(seeds, paired=True)


class TestScenarioSpecs:
    def test_presets_are_valid(self):
        assert set(SCENARIO_PRESETS) == {"sim2real", "adverse-weather",
                                         "cross-camera"}
        assert ADVERSE_WEATHER.paired
        assert len(ADVERSE_WEATHER.fog_levels) == 3

    def test_palette_outside_unit_range_is_rejected(self):
        with pytest.raises(ValueError):
            DomainSpec(palette=[(0.5, 0.5, 0.5), (1.2, 0.0, 0.0)])

    def test_ground_truth_carries_no_score(self):
        with pytest.raises(ValueError):
            Annotation(box=BoundingBox(x_min=0, y_min=0, x_max=2, y_max=2),
                       class_id=0, score=0.4)


class TestGenerateDataset:
    @pytest.mark.asyncio
    async def test_unpaired_sizes(self, tmp_path):
        paths = await generate_dataset(SIM2REAL, DatasetSizes(
            source_train=10, target_train=10, target_val=5), 0,
            tmp_path / "data", (32, 32))
        source = load_manifest(paths.source_train, include_annotations=True)
        target = load_manifest(paths.target_train, include_annotations=False)
        val = load_manifest(paths.target_val, include_annotations=True)
        assert (len(source.images), len(target.images),
                len(val.images)) == (10, 10, 5)
        assert source.domains() == {Domain.SOURCE}
        assert target.domains() == {Domain.TARGET}
        seeds = [{r.scene_seed for r in m.images}
                 for m in (source, target, val)]
        assert not (seeds[0] & seeds[1] or seeds[0] & seeds[2]
                    or seeds[1] & seeds[2])

    @pytest.mark.asyncio
    async def test_source_val_shares_target_val_layouts(self, tmp_path):
        paths = await generate_dataset(CROSS_CAMERA, DatasetSizes(
            source_train=2, target_train=2, target_val=3), 0,
            tmp_path / "data", (32, 32))
        target_val = load_manifest(paths.target_val, include_annotations=True)
        source_val = load_manifest(paths.source_val, include_annotations=True)
        assert source_val.domains() == {Domain.SOURCE}
        assert ([r.scene_seed for r in source_val.images]
                == [r.scene_seed for r in target_val.images])
        assert len(source_val.annotations) == len(target_val.annotations)

    @pytest.mark.asyncio
    async def test_paired_fog_copies_source_annotations(self, tmp_path):
        paths = await generate_dataset(ADVERSE_WEATHER, DatasetSizes(
            source_train=10, target_train=1, target_val=2), 0,
            tmp_path / "data", (32, 32))
        source = load_manifest(paths.source_train, include_annotations=True)
        target = load_manifest(paths.target_train, include_annotations=True)
        assert len(target.images) == 30
        source_boxes = {
            image_id: [(a.bbox, a.category_id) for a in annotations]
            for image_id, annotations in
            source.annotations_by_image().items()}
        for record in target.images:
            boxes = [(a.bbox, a.category_id)
                     for a in target.annotations_by_image()[record.id]]
            assert boxes == source_boxes[record.source_image_id]

    @pytest.mark.asyncio
    async def test_same_call_twice_is_identical(self, tmp_path):
        sizes = DatasetSizes(source_train=3, target_train=3, target_val=2)
        first = await generate_dataset(CROSS_CAMERA, sizes, 1,
                                       tmp_path / "a", (32, 32))
        second = await generate_dataset(CROSS_CAMERA, sizes, 1,
                                        tmp_path / "b", (32, 32))
        for split in ("source_train", "target_train", "target_val",
                      "source_val"):
            a = json.loads(getattr(first, split).read_text())
            b = json.loads(getattr(second, split).read_text())
            assert a == b
            for record in a["images"]:
                assert ((tmp_path / "a" / record["file"]).read_bytes()
                        == (tmp_path / "b" / record["file"]).read_bytes())

    @pytest.mark.asyncio
    async def test_withheld_load_drops_annotations(self, tmp_path):
        paths = await generate_dataset(SIM2REAL, DatasetSizes(
            source_train=2, target_train=2, target_val=1), 0,
            tmp_path / "data", (32, 32))
        target = load_manifest(paths.target_train,
                               include_annotations=False)
        assert target.annotations == []
        assert target.annotations_withheld
        on_disk = json.loads(paths.target_train.read_text())
        assert on_disk["annotations"]
