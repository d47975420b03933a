import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError
from skimage import measure

from app.dataset import (
    crop_or_pad,
    generate_synthetic,
    hflip,
    load_dataset,
    random_crop,
    read_manifest,
    split_dataset,
    split_sizes,
    write_dataset,
    write_manifest,
)
from app.errors import ConfigError, ParseError
from app.models import Sample, SyntheticSceneConfig
from app.raster import decode_pgm, encode_pgm, load_mask, load_raster, save_mask, save_raster


def _samples(n, size=(4, 4)):
    return [Sample(id=f"s{i:03d}", image=np.full(size, i / 255.0, dtype=np.float32),
                   mask=np.zeros(size, dtype=np.uint8)) for i in range(n)]


class TestSynthesis:
    def test_same_seed_same_scenes(self, small_scene):
        first, second = generate_synthetic(small_scene, 4), generate_synthetic(small_scene, 4)
        for a, b in zip(first, second):
            assert a.id == b.id
            assert_array_equal(a.image, b.image)
            assert_array_equal(a.mask, b.mask)

    def test_different_seeds_differ(self, small_scene):
        other = small_scene.model_copy(update={"seed": 4})
        assert not np.array_equal(generate_synthetic(small_scene, 1)[0].image, generate_synthetic(other, 1)[0].image)

    def test_prefix_is_stable_when_n_grows(self, small_scene):
        few, many = generate_synthetic(small_scene, 2), generate_synthetic(small_scene, 5)
        assert_array_equal(few[1].image, many[1].image)

    @pytest.mark.parametrize("background", ["flat", "gradient", "cloud-noise"])
    def test_single_target_is_one_component(self, background):
        cfg = SyntheticSceneConfig(size=(48, 48), target_count=(1, 1), background=background, seed=7)
        for sample in generate_synthetic(cfg, 5):
            assert measure.label(sample.mask, connectivity=2).max() == 1

    @pytest.mark.parametrize("seed", range(3))
    def test_targets_are_small(self, seed):
        cfg = SyntheticSceneConfig(seed=seed)
        for sample in generate_synthetic(cfg, 2):
            assert sample.image.shape == (256, 256)
            assert 0 < sample.mask.mean() < 0.01
            for region in measure.regionprops(measure.label(sample.mask, connectivity=2)):
                rows, cols = region.bbox[2] - region.bbox[0], region.bbox[3] - region.bbox[1]
                assert rows <= 9 and cols <= 9

    def test_targets_are_brighter_than_the_background(self):
        cfg = SyntheticSceneConfig(size=(64, 64), background="flat", noise_sigma=0.0, seed=2)
        for sample in generate_synthetic(cfg, 3):
            assert sample.image[sample.mask > 0].min() > cfg.background_level

    def test_image_range_and_dtype(self, small_scene):
        sample = generate_synthetic(small_scene, 1)[0]
        assert sample.image.dtype == np.float32
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        assert set(np.unique(sample.mask)) <= {0, 1}

    def test_empty_flat_scene_is_the_level(self):
        cfg = SyntheticSceneConfig(size=(8, 8), target_count=(0, 0), background="flat", noise_sigma=0.0)
        sample = generate_synthetic(cfg, 1)[0]
        assert_allclose(sample.image, 0.2, rtol=1e-6)
        assert sample.mask.sum() == 0

    def test_infeasible_contrast(self):
        cfg = SyntheticSceneConfig(target_intensity=(0.3, 0.5), background_level=0.2, contrast_margin=0.2)
        with pytest.raises(ConfigError, match="infeasible"):
            generate_synthetic(cfg, 1)

    @pytest.mark.parametrize("n", [0, -3])
    def test_needs_at_least_one_sample(self, small_scene, n):
        with pytest.raises(ConfigError):
            generate_synthetic(small_scene, n)

    def test_radius_must_fit_the_window(self):
        with pytest.raises(ValidationError):
            SyntheticSceneConfig(target_radius=(1.0, 6.0))


class TestSplit:
    @pytest.mark.parametrize("n,expected", [(427, (256, 85, 86)), (5, (3, 1, 1)), (10, (6, 2, 2))])
    def test_sizes(self, n, expected):
        assert split_sizes(n) == expected

    def test_partition_is_disjoint_and_complete(self):
        samples = _samples(427)
        split = split_dataset(samples, seed=1)
        ids = [s.id for part in (split.train, split.val, split.test) for s in part]
        assert (len(split.train), len(split.val), len(split.test)) == (256, 85, 86)
        assert sorted(ids) == sorted(s.id for s in samples)

    def test_seeded_shuffle(self):
        samples = _samples(20)
        a, b = split_dataset(samples, seed=3), split_dataset(samples, seed=3)
        assert [s.id for s in a.train] == [s.id for s in b.train]
        assert [s.id for s in a.train] != [s.id for s in samples[:12]]

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            split_dataset(_samples(4))

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            split_dataset(_samples(10), ratios=(3, 0, 1))


class TestGeometry:
    def _sample(self, shape):
        image = np.arange(np.prod(shape), dtype=np.float32).reshape(shape) / np.prod(shape)
        mask = np.zeros(shape, dtype=np.uint8)
        mask[shape[0] // 2, shape[1] // 2] = 1
        return Sample(id="x", image=image, mask=mask)

    def test_centre_crop(self):
        sample = self._sample((300, 300))
        out = crop_or_pad(sample)
        assert out.image.shape == (256, 256)
        assert_array_equal(out.image, sample.image[22:278, 22:278])
        assert out.mask[128, 128] == 1

    def test_exact_size_is_unchanged(self):
        sample = self._sample((256, 256))
        assert_array_equal(crop_or_pad(sample).image, sample.image)

    def test_pad_one_axis_crop_the_other(self):
        sample = self._sample((100, 300))
        out = crop_or_pad(sample)
        assert out.image.shape == (256, 256)
        assert_array_equal(out.image[78:178], sample.image[:, 22:278])
        assert out.image[:78].sum() == 0
        assert out.mask.sum() == 1

    def test_random_crop_keeps_alignment(self, rng):
        sample = self._sample((40, 40))
        out = random_crop(sample, (16, 16), rng)
        assert out.image.shape == out.mask.shape == (16, 16)
        where = np.argwhere(sample.image == out.image[0, 0])[0]
        assert_array_equal(out.mask, sample.mask[where[0]:where[0] + 16, where[1]:where[1] + 16])

    def test_hflip(self):
        sample = self._sample((2, 3))
        assert_array_equal(hflip(sample).image, sample.image[:, ::-1])
        assert_array_equal(hflip(hflip(sample)).mask, sample.mask)

    def test_misaligned_sample_is_rejected(self):
        with pytest.raises(ValidationError):
            Sample(id="x", image=np.zeros((4, 4)), mask=np.zeros((4, 5)))


class TestGraymap:
    def test_header_layout(self):
        data = encode_pgm(np.array([[0, 255], [128, 1]], dtype=np.uint8))
        assert data == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 1])

    def test_single_line_header_with_comment(self):
        raster = decode_pgm(b"P5 # written by hand\n2 2 255\n" + bytes([1, 2, 3, 4]))
        assert_array_equal(raster, [[1, 2], [3, 4]])

    def test_float_rasters_are_quantized(self, tmp_path):
        values = np.array([[0.0, 0.5], [1.0, 0.2]], dtype=np.float32)
        save_raster(values, tmp_path / "x.pgm")
        assert_allclose(load_raster(tmp_path / "x.pgm"), np.rint(values * 255) / 255, rtol=1e-6)

    def test_masks_are_binary(self, tmp_path):
        save_mask(np.array([[0, 1], [3, 0]]), tmp_path / "m.pgm")
        assert_array_equal(load_mask(tmp_path / "m.pgm"), [[0, 1], [1, 0]])

    def test_bad_magic(self):
        with pytest.raises(ParseError) as info:
            decode_pgm(b"P2\n2 2\n255\n0 0 0 0")
        assert info.value.offset == 0

    def test_magic_glued_to_width(self):
        with pytest.raises(ParseError, match="after magic") as info:
            decode_pgm(b"P52 2 255\n" + bytes(4))
        assert info.value.offset == 2

    def test_truncated_payload(self):
        with pytest.raises(ParseError, match="truncated") as info:
            decode_pgm(b"P5\n2 2\n255\n" + bytes(3))
        assert info.value.offset == 11

    def test_sixteen_bit_is_rejected(self):
        with pytest.raises(ParseError):
            decode_pgm(b"P5\n2 2\n65535\n" + bytes(8))

    def test_missing_header_field(self):
        with pytest.raises(ParseError, match="end of header"):
            decode_pgm(b"P5\n2")


class TestDirectory:
    def test_manifest_round_trip(self, tmp_path):
        assignments = {"a": "train", "b": "val", "c": "test"}
        write_manifest(assignments, tmp_path / "split.txt")
        assert read_manifest(tmp_path / "split.txt") == assignments

    def test_manifest_errors_name_the_line(self, tmp_path):
        (tmp_path / "split.txt").write_text("a train\nb holdout\n")
        with pytest.raises(ConfigError, match="line 2") as info:
            read_manifest(tmp_path / "split.txt")
        assert info.value.line == 2

    def test_dataset_round_trip(self, tmp_path, small_scene):
        split = split_dataset(generate_synthetic(small_scene, 5), seed=0)
        write_dataset(split, tmp_path)
        loaded = load_dataset(tmp_path)
        for name in ("train", "val", "test"):
            written, read = getattr(split, name), getattr(loaded, name)
            assert [s.id for s in written] == [s.id for s in read]
            for a, b in zip(written, read):
                assert_allclose(b.image, np.rint(a.image * 255) / 255, atol=1e-6)
                assert_array_equal(a.mask, b.mask)

    def test_directory_without_manifest_is_split(self, tmp_path, small_scene):
        split = split_dataset(generate_synthetic(small_scene, 10), seed=0)
        write_dataset(split, tmp_path)
        (tmp_path / "split.txt").unlink()
        loaded = load_dataset(tmp_path)
        assert (len(loaded.train), len(loaded.val), len(loaded.test)) == (6, 2, 2)

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path)
