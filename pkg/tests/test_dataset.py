import numpy as np
import pytest

from cpcad.dataset import (
    ANOMALOUS,
    NORMAL,
    ImageSample,
    SynthDefectConfig,
    augment_train,
    generate_synthetic,
    load_mvtec_class,
    save_mvtec_layout,
)
from cpcad.errors import ConfigError, DatasetLayoutError, MissingMaskError


class ForcedRng:
    """Stand-in rng that returns scripted values for augmentation draws."""

    def __init__(self, scale, top=0, left=0, flip=False):
        self._scale, self._top, self._left = scale, top, left
        self._flip = flip
        self._int_draws = iter([top, left])

    def uniform(self, lo, hi):
        return self._scale

    def integers(self, lo, hi):
        return next(self._int_draws)

    def random(self):
        return 0.0 if self._flip else 1.0


def _write_mini_layout(tmp_path, n_train=3, n_good=1, n_defect=1, side=64):
    import cv2

    base = tmp_path / "widget"
    rng = np.random.default_rng(0)
    for d in ("train/good", "test/good", "test/scratch", "ground_truth/scratch"):
        (base / d).mkdir(parents=True)
    for i in range(n_train):
        cv2.imwrite(str(base / "train/good" / f"{i}.png"),
                    rng.integers(0, 255, (side, side), dtype=np.uint8))
    for i in range(n_good):
        cv2.imwrite(str(base / "test/good" / f"{i}.png"),
                    rng.integers(0, 255, (side, side), dtype=np.uint8))
    for i in range(n_defect):
        cv2.imwrite(str(base / "test/scratch" / f"{i}.png"),
                    rng.integers(0, 255, (side, side), dtype=np.uint8))
        mask = np.zeros((side, side), dtype=np.uint8)
        mask[10:20, 10:20] = 255
        cv2.imwrite(str(base / "ground_truth/scratch" / f"{i}_mask.png"), mask)
    return tmp_path


class TestMvtecLoader:
    def test_mini_layout_counts(self, tmp_path):
        root = _write_mini_layout(tmp_path)
        split = load_mvtec_class(root, "widget", 64)
        assert len(split.train) == 3
        assert len(split.test) == 2
        masks = [s for s in split.test if s.gt_mask is not None]
        assert len(masks) == 1
        assert masks[0].label == ANOMALOUS

    def test_resize_to_requested_side(self, tmp_path):
        root = _write_mini_layout(tmp_path, side=48)
        split = load_mvtec_class(root, "widget", 96)
        for s in split.train + split.test:
            assert s.pixels.shape == (96, 96)
            if s.gt_mask is not None:
                assert s.gt_mask.shape == (96, 96)
                assert set(np.unique(s.gt_mask)) <= {0, 1}

    def test_no_anomalous_directory_is_fine(self, tmp_path):
        root = _write_mini_layout(tmp_path, n_defect=0)
        import shutil

        shutil.rmtree(root / "widget" / "test" / "scratch")
        split = load_mvtec_class(root, "widget", 64)
        assert all(s.label == NORMAL for s in split.test)
        assert all(s.gt_mask is None for s in split.test)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetLayoutError):
            load_mvtec_class(tmp_path, "nothere", 64)

    def test_missing_mask(self, tmp_path):
        root = _write_mini_layout(tmp_path)
        for p in (root / "widget" / "ground_truth" / "scratch").iterdir():
            p.unlink()
        with pytest.raises(MissingMaskError):
            load_mvtec_class(root, "widget", 64)

    def test_roundtrip_through_layout(self, tmp_path):
        split = generate_synthetic(
            SynthDefectConfig(seed=1, n_train=2, n_test_normal=1, n_test_anomalous=2),
            64,
        )
        out = tmp_path / "rt"
        save_mvtec_layout(split, out)
        reloaded = load_mvtec_class(out, "synthetic", 64)
        assert len(reloaded.train) == len(split.train)
        assert sorted(s.label for s in reloaded.test) == sorted(
            s.label for s in split.test
        )
        assert sum(s.gt_mask is not None for s in reloaded.test) == 2
        for s in reloaded.train + reloaded.test:
            assert s.pixels.shape == (64, 64)


class TestSynthetic:
    def test_deterministic(self):
        cfg = SynthDefectConfig(seed=9, n_train=3, n_test_normal=2, n_test_anomalous=2)
        a = generate_synthetic(cfg, 64)
        b = generate_synthetic(cfg, 64)
        for sa, sb in zip(a.train + a.test, b.train + b.test):
            assert np.array_equal(sa.pixels, sb.pixels)
            if sa.gt_mask is not None:
                assert np.array_equal(sa.gt_mask, sb.gt_mask)

    def test_rectangle_blot_mask_pixel_count(self):
        # fixed 0.1 fraction on a 256 image: each rect side rounds to 25 or 26
        cfg = SynthDefectConfig(
            defect_size_range=(0.1, 0.1),
            seed=2,
            n_train=1,
            n_test_normal=0,
            n_test_anomalous=5,
        )
        split = generate_synthetic(cfg, 256)
        for s in split.test:
            n = int(s.gt_mask.sum())
            assert 25 * 25 <= n <= 26 * 26

    def test_mask_marks_exactly_changed_pixels(self):
        from cpcad.dataset import _paint_defect

        for kind in ("rectangle-blot", "intensity-shift", "texture-swap"):
            cfg = SynthDefectConfig(
                defect_kind=kind, seed=4, n_train=1, n_test_normal=0, n_test_anomalous=3
            )
            split = generate_synthetic(cfg, 64)
            for s in split.test:
                assert s.gt_mask.any()
                assert set(np.unique(s.gt_mask)) <= {0, 1}
            # pixel-by-pixel check against the painter on a known clean image
            clean = np.full((64, 64), 0.5)
            painted = _paint_defect(clean, cfg, np.random.default_rng(17))
            assert np.array_equal(
                (painted != clean).astype(np.uint8),
                np.where(painted != clean, 1, 0),
            )

    def test_rectangle_blot_mask_matches_independent_rasterization(self):
        # replicate the painter's rng draws (h, w, top, left) and rasterize
        # the rectangle independently
        from cpcad.dataset import _paint_defect

        cfg = SynthDefectConfig(defect_kind="rectangle-blot", defect_size_range=(0.1, 0.3))
        clean = np.full((128, 128), 0.5)
        painted = _paint_defect(clean, cfg, np.random.default_rng(21))

        oracle = np.random.default_rng(21)
        h = max(int(round(oracle.uniform(0.1, 0.3) * 128)), 1)
        w = max(int(round(oracle.uniform(0.1, 0.3) * 128)), 1)
        top = int(oracle.integers(0, 128 - h + 1))
        left = int(oracle.integers(0, 128 - w + 1))
        raster = np.zeros((128, 128), dtype=np.uint8)
        raster[top : top + h, left : left + w] = 1
        assert np.array_equal((painted != clean).astype(np.uint8), raster)

    def test_zero_anomalous(self):
        cfg = SynthDefectConfig(seed=1, n_train=2, n_test_normal=3, n_test_anomalous=0)
        split = generate_synthetic(cfg, 64)
        assert all(s.label == NORMAL for s in split.test)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            SynthDefectConfig(defect_size_range=(0.2, 0.7)).validate()
        with pytest.raises(ConfigError):
            SynthDefectConfig(n_train=0).validate()
        with pytest.raises(ConfigError):
            generate_synthetic(SynthDefectConfig(texture_kind="plaid"), 64)

    def test_intensities_in_unit_interval(self):
        for kind in ("sine-grating", "checker", "value-noise"):
            split = generate_synthetic(
                SynthDefectConfig(texture_kind=kind, seed=0, n_train=2,
                                  n_test_normal=1, n_test_anomalous=1),
                64,
            )
            for s in split.train + split.test:
                assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0


class TestAugment:
    def _sample(self, side=32):
        rng = np.random.default_rng(8)
        return ImageSample(rng.random((side, side)), NORMAL, None, "t")

    def test_identity_when_scale_one_no_flip(self):
        s = self._sample()
        out = augment_train(s, ForcedRng(scale=1.0, flip=False))
        assert np.array_equal(out.pixels, s.pixels)

    def test_flip_reverses_columns(self):
        s = self._sample()
        out = augment_train(s, ForcedRng(scale=1.0, flip=True))
        assert np.array_equal(out.pixels, s.pixels[:, ::-1])

    def test_deterministic_for_fixed_seed(self):
        s = self._sample()
        a = augment_train(s, np.random.default_rng(123))
        b = augment_train(s, np.random.default_rng(123))
        assert np.array_equal(a.pixels, b.pixels)

    def test_preserves_shape_and_range(self):
        s = self._sample(64)
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = augment_train(s, rng)
            assert out.pixels.shape == s.pixels.shape
            assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_rejects_anomalous(self):
        bad = ImageSample(np.zeros((8, 8)), ANOMALOUS, None, "x")
        with pytest.raises(ConfigError):
            augment_train(bad, np.random.default_rng(0))
