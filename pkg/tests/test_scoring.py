import dataclasses
import math

import numpy as np
import pytest

from cpcad.dataset import ANOMALOUS, NORMAL, ImageSample
from cpcad.errors import (
    BankHygieneError,
    BankTooSmallError,
    ConfigError,
    EmptyScoreMapError,
)
from cpcad.geometry import GridSpec, coverage_counts, pixel_footprint, plan_grid
from cpcad.metrics import auroc
from cpcad.scoring import (
    ScoreMap,
    build_negative_bank,
    classify,
    image_score,
    make_mask,
    score_image,
)
from conftest import DESK_GRID


def random_scoremap(rng, side=7, absent=0):
    values = rng.random((side, side)) * 3
    counts = rng.integers(1, 5, size=(side, side))
    for _ in range(absent):
        r, c = rng.integers(0, side, size=2)
        counts[r, c] = 0
        values[r, c] = np.nan
    return ScoreMap(values=values, counts=counts)


class TestNegativeBank:
    def test_pool_size_from_geometry(self, desk_split, desk_bundle):
        # one 128-side image, grid (128,64,32,32,16): 3x3 patches x 3x3
        # sub-patches = 81 embeddings per direction
        bank = build_negative_bank(desk_split.train[:1], desk_bundle, seed=0)
        assert bank.pool_size == 81
        big = build_negative_bank(
            desk_split.train[:1], desk_bundle, max_pool_size=50, seed=0
        )
        assert big.pool_size == 50

    def test_same_seed_identical(self, desk_split, desk_bundle):
        a = build_negative_bank(desk_split.train[:3], desk_bundle, max_pool_size=100, seed=4)
        b = build_negative_bank(desk_split.train[:3], desk_bundle, max_pool_size=100, seed=4)
        for direction in a.pools:
            assert np.array_equal(a.pools[direction], b.pools[direction])
        assert a.fingerprint == b.fingerprint

    def test_fingerprint_tracks_source_list(self, desk_split, desk_bundle):
        a = build_negative_bank(desk_split.train[:3], desk_bundle, seed=0)
        b = build_negative_bank(desk_split.train[:2], desk_bundle, seed=0)
        assert a.fingerprint != b.fingerprint

    def test_rejects_test_data(self, desk_split, desk_bundle):
        anomalous = [s for s in desk_split.test if s.label == ANOMALOUS][0]
        with pytest.raises(BankHygieneError):
            build_negative_bank(
                desk_split.train[:2] + [anomalous], desk_bundle, seed=0
            )
        # a mask smuggled onto a "normal" sample is rejected too
        disguised = dataclasses.replace(
            anomalous, label=NORMAL
        )
        with pytest.raises(BankHygieneError):
            build_negative_bank([disguised] + desk_split.train[:2], desk_bundle, seed=0)

    def test_too_small_pool(self, desk_split, desk_bundle):
        with pytest.raises(BankTooSmallError):
            build_negative_bank(
                desk_split.train[:1], desk_bundle, max_pool_size=4, seed=0,
                n_negatives=16,
            )


class TestScoreImage:
    def test_deterministic(self, desk_split, desk_bundle):
        bank = build_negative_bank(desk_split.train[:4], desk_bundle, seed=0)
        image = desk_split.test[-1]
        a = score_image(image, desk_bundle, bank, rng_seed=3)
        b = score_image(image, desk_bundle, bank, rng_seed=3)
        assert np.array_equal(a.counts, b.counts)
        assert np.array_equal(a.values[a.present], b.values[b.present])

    def test_bank_bundle_mismatch(self, desk_split, desk_bundle):
        bank = build_negative_bank(desk_split.train[:4], desk_bundle, seed=0)
        bank.bundle_fingerprint = "deadbeef"
        with pytest.raises(ConfigError):
            score_image(desk_split.test[0], desk_bundle, bank)

    def test_counts_match_pair_enumeration(self, desk_split, desk_bundle):
        # exhaustive oracle: accumulate expected counts per lattice position
        from cpcad.contrastive import directional_pairs

        bank = build_negative_bank(desk_split.train[:4], desk_bundle, seed=0)
        smap = score_image(desk_split.test[0], desk_bundle, bank, rng_seed=0)
        layout = plan_grid(DESK_GRID)
        s = layout.subpatches_per_patch_axis
        p = layout.patches_per_axis
        r = DESK_GRID.stride_ratio
        L = layout.distinct_positions_per_axis
        expected = np.zeros((L, L), dtype=np.int64)
        for direction in desk_bundle.directions:
            for k in desk_bundle.train_config.offsets:
                for pr in range(p):
                    for pc in range(p):
                        for _, (tr, tc) in directional_pairs(s, direction, k):
                            expected[pr * r + tr, pc * r + tc] += 1
        assert np.array_equal(smap.counts, expected)

    def test_single_direction_border_rows_absent(self, desk_split, desk_bundle):
        # restrict to from_above, k=2 on the 3x3 sub-grid: target local row
        # is always 2, so present lattice rows are exactly {2, 4, 6}
        import copy

        single = copy.copy(desk_bundle)
        single.encoders = {"from_above": desk_bundle.encoders["from_above"]}
        single.predictors = {"from_above": desk_bundle.predictors["from_above"]}
        bank = build_negative_bank(desk_split.train[:4], single, seed=0)
        smap = score_image(desk_split.test[0], single, bank, offsets=(2,), rng_seed=0)
        present_rows = {int(r) for r, _ in zip(*np.nonzero(smap.present))}
        assert present_rows == {2, 4, 6}
        assert np.isnan(smap.values[0]).all()

    def test_converged_one_image_model_scores_noise_higher(self, desk_split):
        # train to convergence on a single image, then compare that image's
        # mean score against a random-noise image under the same model
        from cpcad.trainer import TrainConfig, train_class
        from conftest import DESK_ENCODER

        one = type(desk_split)(
            train=desk_split.train[:1], test=[], class_name="one"
        )
        cfg = TrainConfig(epochs=200, batch_size=1, n_negatives=16, offsets=(2,), seed=0)
        bundle = train_class(one, DESK_GRID, DESK_ENCODER, cfg)
        bank = build_negative_bank(one.train, bundle, seed=0)
        noise = ImageSample(
            np.random.default_rng(0).random((128, 128)), NORMAL, None, "noise"
        )
        m_train = score_image(one.train[0], bundle, bank, rng_seed=0)
        m_noise = score_image(noise, bundle, bank, rng_seed=0)
        assert m_train.present_values().mean() < m_noise.present_values().mean()


class TestImageScore:
    def test_uniform_map_returns_constant(self):
        smap = ScoreMap(values=np.full((7, 7), 1.25), counts=np.ones((7, 7), int))
        assert image_score(smap) == pytest.approx(1.25, abs=1e-15)

    def test_top_count_for_default_lattice(self):
        # M = 529 present positions, top 5% -> ceil(26.45) = 27 values
        rng = np.random.default_rng(0)
        values = rng.random((23, 23))
        smap = ScoreMap(values=values, counts=np.ones((23, 23), int))
        expected = np.sort(values.ravel())[-27:].mean()
        assert image_score(smap, 0.05) == pytest.approx(expected, abs=1e-12)

    def test_planted_outlier_oracle(self):
        values = np.zeros((10, 10))
        values[3, 4] = 10.0
        smap = ScoreMap(values=values, counts=np.ones((10, 10), int))
        # m = 5, mean of {10, 0, 0, 0, 0} = 2.0
        assert image_score(smap, 0.05) == pytest.approx(2.0, abs=1e-12)

    def test_monotone_in_any_value(self):
        rng = np.random.default_rng(1)
        smap = random_scoremap(rng)
        base = image_score(smap, 0.1)
        bumped = ScoreMap(values=smap.values.copy(), counts=smap.counts)
        bumped.values[2, 2] += 5.0
        assert image_score(bumped, 0.1) >= base

    def test_absent_positions_excluded(self):
        values = np.full((4, 4), np.nan)
        counts = np.zeros((4, 4), int)
        values[0, 0], counts[0, 0] = 2.0, 3
        smap = ScoreMap(values=values, counts=counts)
        assert image_score(smap, 0.05) == 2.0

    def test_empty_map_rejected(self):
        smap = ScoreMap(values=np.full((3, 3), np.nan), counts=np.zeros((3, 3), int))
        with pytest.raises(EmptyScoreMapError):
            image_score(smap)


class TestMakeMask:
    def test_uniform_map_gives_uniform_heatmap(self):
        spec = GridSpec(128, 64, 32, 32, 16)
        L = plan_grid(spec).distinct_positions_per_axis
        smap = ScoreMap(values=np.full((L, L), 0.7), counts=np.ones((L, L), int))
        mask = make_mask(smap, spec)
        assert mask.heatmap.shape == (128, 128)
        assert np.allclose(mask.heatmap, 0.7)

    def test_single_hot_position_footprint(self):
        from conftest import DESK_GRID as spec

        L = plan_grid(spec).distinct_positions_per_axis
        values = np.zeros((L, L))
        values[2, 3] = 1.0
        smap = ScoreMap(values=values, counts=np.ones((L, L), int))
        heat = make_mask(smap, spec).heatmap
        top, left, h, w = pixel_footprint((2, 3), spec)
        outside = heat.copy()
        outside[top : top + h, left : left + w] = 0
        assert np.all(outside == 0)
        # per-pixel brute-force coverage oracle
        cover = coverage_counts(plan_grid(spec))
        inside = heat[top : top + h, left : left + w]
        expected = 1.0 / cover[top : top + h, left : left + w]
        assert np.allclose(inside, expected)

    def test_values_bounded_by_map_range(self):
        spec = GridSpec(128, 64, 32, 32, 16)
        rng = np.random.default_rng(2)
        L = plan_grid(spec).distinct_positions_per_axis
        for _ in range(10):
            smap = ScoreMap(
                values=rng.random((L, L)) * 4 - 1, counts=np.ones((L, L), int)
            )
            heat = make_mask(smap, spec).heatmap
            assert heat.min() >= smap.values.min() - 1e-12
            assert heat.max() <= smap.values.max() + 1e-12

    def test_mask_footprint_duality(self):
        # heatmap times per-pixel coverage equals footprint-accumulated
        # sums; with 50% overlap the coverage counts are powers of two, so
        # the division round-trips exactly
        spec = GridSpec(128, 64, 32, 32, 16)
        layout = plan_grid(spec)
        L = layout.distinct_positions_per_axis
        rng = np.random.default_rng(3)
        for _ in range(10):
            smap = ScoreMap(
                values=rng.random((L, L)), counts=np.ones((L, L), dtype=int)
            )
            heat = make_mask(smap, spec).heatmap
            cover = coverage_counts(layout, smap.present)
            sums = np.zeros((spec.image_side, spec.image_side))
            for r, c in zip(*np.nonzero(smap.present)):
                top, left, h, w = pixel_footprint((r, c), spec)
                sums[top : top + h, left : left + w] += smap.values[r, c]
            assert np.array_equal(heat * cover, sums)

    def test_mask_footprint_duality_with_holes(self):
        # with absent positions the coverage can be odd, so compare within
        # floating-point tolerance
        spec = GridSpec(128, 64, 32, 32, 16)
        layout = plan_grid(spec)
        L = layout.distinct_positions_per_axis
        rng = np.random.default_rng(5)
        values = rng.random((L, L))
        counts = rng.integers(0, 3, size=(L, L))
        counts[0, 0] = 1
        values[counts == 0] = np.nan
        smap = ScoreMap(values=values, counts=counts)
        heat = make_mask(smap, spec).heatmap
        cover = coverage_counts(layout, smap.present)
        sums = np.zeros((spec.image_side, spec.image_side))
        for r, c in zip(*np.nonzero(smap.present)):
            top, left, h, w = pixel_footprint((r, c), spec)
            sums[top : top + h, left : left + w] += values[r, c]
        assert np.allclose(heat * cover, sums, atol=1e-12)


class TestClassify:
    def test_boundary_is_anomalous(self):
        assert classify(1.0, 1.0) == "anomalous"
        assert classify(0.999, 1.0) == "normal"

    def test_infinite_threshold(self):
        assert classify(1e9, math.inf) == "normal"

    def test_tau_sweep_reproduces_roc_staircase(self):
        rng = np.random.default_rng(4)
        scores = np.round(rng.random(40), 2)
        labels = np.array(["anomalous" if x else "normal" for x in rng.random(40) < 0.5])
        labels[0], labels[1] = "anomalous", "normal"
        res = auroc(scores, labels)
        n_pos = np.sum(labels == "anomalous")
        n_neg = len(labels) - n_pos
        points = {(0.0, 0.0)}
        for tau in np.unique(scores):
            pred = np.array([classify(s, tau) for s in scores])
            tp = np.sum((pred == "anomalous") & (labels == "anomalous"))
            fp = np.sum((pred == "anomalous") & (labels == "normal"))
            points.add((fp / n_neg, tp / n_pos))
        assert points == {tuple(p) for p in res.curve}
