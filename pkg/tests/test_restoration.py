import warnings

import cv2
import numpy as np
import pytest

from planedeblur.geometry import Intrinsics, PlaneParams, PoseGrid, plane_depth_map
from planedeblur.metrics import mask_accuracy, psnr
from planedeblur.restoration import (BlurOperator, alternate_restore,
                                     build_blur_operator, estimate_latent,
                                     l0_smooth, plane_data_costs, plane_guides,
                                     segment_planes, single_plane_operator)
from planedeblur.synthesis import (TSF, SceneModel, SegmentationMasks,
                                   blur_multi_plane, blur_single_plane)

K1000 = Intrinsics(1000.0)
SHAPE = (90, 120)
FRONTO = PlaneParams.from_direction((0.0, 0.0, 1.0))
FAR = PlaneParams.from_direction((0.0, 0.0, 1.0), scale=0.5)


def cartoon(h, w, seed=0, n=24, clear_columns=None):
    """Piecewise-constant test image; optionally keeps a column band flat."""
    rng = np.random.default_rng(seed)
    img = np.full((h, w), 0.5)
    placed = tries = 0
    while placed < n and tries < 500:
        tries += 1
        r0, c0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
        rh, cw = rng.integers(6, 26), rng.integers(6, 26)
        c1 = min(c0 + cw, w)
        if clear_columns and c0 < clear_columns[1] and c1 > clear_columns[0]:
            continue
        img[r0:r0 + rh, c0:c1] = rng.uniform(0.05, 0.95)
        placed += 1
    return cv2.GaussianBlur(img, (0, 0), 0.5)


def make_grid():
    return PoseGrid.from_ranges((-0.005, 0.005, 5), (-0.005, 0.005, 5),
                                (0.0, 0.0, 1))


def three_pose_tsf(grid):
    dense = np.zeros(len(grid))
    dense[grid.nearest_index(-0.005, 0.0, 0.0)] = 0.4
    dense[grid.nearest_index(0.0, 0.0, 0.0)] = 0.3
    dense[grid.nearest_index(0.005, 0.0025, 0.0)] = 0.3
    return TSF.from_dense(grid, dense)


def total_variation(img):
    return float(np.abs(np.diff(img, axis=0)).sum() +
                 np.abs(np.diff(img, axis=1)).sum())


@pytest.fixture(scope="module")
def two_plane_scene():
    """Blurred two-plane scene with a flat band at the plane boundary."""
    grid = make_grid()
    tsf = three_pose_tsf(grid)
    f = cartoon(*SHAPE, seed=1, n=40, clear_columns=(50, 72))
    truth = np.zeros(SHAPE, dtype=int)
    truth[:, 61:] = 1
    masks = SegmentationMasks.from_labels(truth, 2)
    g = blur_multi_plane(f, tsf, SceneModel([FRONTO, FAR], masks, K1000))
    return dict(f=f, g=g, tsf=tsf, truth=truth, masks=masks,
                planes=[FRONTO, FAR])


@pytest.fixture(scope="module")
def two_plane_am(two_plane_scene):
    s = two_plane_scene
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return alternate_restore(s["g"], s["tsf"], s["planes"], K1000)


class TestBlurOperator:
    def test_matches_single_plane_blur(self):
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        f = cartoon(*SHAPE, seed=2)
        W = build_blur_operator(tsf, [FRONTO], SegmentationMasks.full(SHAPE),
                                K1000, SHAPE)
        np.testing.assert_allclose(W.apply(f),
                                   blur_single_plane(f, tsf, FRONTO, K1000),
                                   atol=1e-10)

    def test_matches_multi_plane_blur(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        np.testing.assert_allclose(W.apply(s["f"]), s["g"], atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_identity(self, seed):
        rng = np.random.default_rng(seed)
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        truth = (np.arange(24) % 2).reshape(4, 6).repeat(6, 0).repeat(5, 1)
        masks = SegmentationMasks.from_labels(truth[:24, :30], 2)
        W = build_blur_operator(tsf, [FRONTO, FAR], masks, K1000, (24, 30))
        x = rng.uniform(size=(24, 30))
        y = rng.uniform(size=(24, 30))
        lhs = float(np.sum(W.apply(x) * y))
        rhs = float(np.sum(x * W.adjoint(y)))
        assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))

    def test_linearity(self):
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        W = build_blur_operator(tsf, [FRONTO], SegmentationMasks.full((20, 25)),
                                K1000, (20, 25))
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(20, 25))
        b = rng.uniform(size=(20, 25))
        np.testing.assert_allclose(W.apply(2.0 * a - 3.0 * b),
                                   2.0 * W.apply(a) - 3.0 * W.apply(b),
                                   atol=1e-12)

    def test_mask_shape_mismatch_rejected(self):
        grid = make_grid()
        with pytest.raises(ValueError):
            build_blur_operator(TSF.delta(grid), [FRONTO],
                                SegmentationMasks.full((10, 10)), K1000,
                                (12, 12))


class TestEstimateLatent:
    def test_identity_operator_near_passthrough(self):
        grid = make_grid()
        f = cartoon(*SHAPE, seed=4)
        W = build_blur_operator(TSF.delta(grid), [FRONTO],
                                SegmentationMasks.full(SHAPE), K1000, SHAPE)
        out = estimate_latent(f, W)
        assert psnr(out, f) >= 45.0

    def test_oracle_deblur_gains_6db(self):
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        f = cartoon(*SHAPE, seed=5)
        g = blur_single_plane(f, tsf, FRONTO, K1000)
        W = build_blur_operator(tsf, [FRONTO], SegmentationMasks.full(SHAPE),
                                K1000, SHAPE)
        restored = estimate_latent(g, W)
        assert psnr(restored, f, border=8) >= psnr(g, f, border=8) + 6.0

    def test_strong_regularization_shrinks_tv(self):
        grid = make_grid()
        f = cartoon(*SHAPE, seed=6)
        W = build_blur_operator(TSF.delta(grid), [FRONTO],
                                SegmentationMasks.full(SHAPE), K1000, SHAPE)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            flat = estimate_latent(f, W, lam_f=0.5)
        assert total_variation(flat) < total_variation(f)

    def test_color_channels_processed(self):
        grid = make_grid()
        f = np.stack([cartoon(30, 40, seed=s) for s in range(3)], axis=-1)
        W = build_blur_operator(TSF.delta(grid), [FRONTO],
                                SegmentationMasks.full((30, 40)), K1000,
                                (30, 40))
        out = estimate_latent(f, W)
        assert out.shape == f.shape
        assert psnr(out, f) >= 40.0

    def test_shape_mismatch_rejected(self):
        grid = make_grid()
        W = build_blur_operator(TSF.delta(grid), [FRONTO],
                                SegmentationMasks.full((10, 10)), K1000,
                                (10, 10))
        with pytest.raises(ValueError):
            estimate_latent(np.zeros((12, 12)), W)


class TestL0Smooth:
    def test_constant_image_unchanged(self):
        c = np.full((20, 20), 0.3)
        np.testing.assert_allclose(l0_smooth(c, 0.01), c, atol=1e-12)

    def test_zero_weight_is_identity(self):
        img = cartoon(20, 30, seed=7)
        np.testing.assert_array_equal(l0_smooth(img, 0.0), img)

    def test_edge_kept_texture_removed(self):
        xs = np.arange(64)
        profile = np.where(xs >= 32, 0.5, 0.0) + 0.01 * np.sin(xs * 2.0)
        img = np.tile(profile, (32, 1))
        out = l0_smooth(img, 0.01)
        edge = out[16, 40] - out[16, 20]
        assert abs(edge - 0.5) <= 0.025  # within 5% of the step height
        assert np.abs(np.diff(out[16, 5:25])).max() <= 1e-3

    def test_color_shape_preserved(self):
        img = np.stack([cartoon(16, 16, seed=s) for s in range(3)], axis=-1)
        assert l0_smooth(img, 0.01).shape == img.shape


class TestSegmentPlanes:
    def test_single_plane_full_mask(self):
        grid = make_grid()
        W = build_blur_operator(TSF.delta(grid), [FRONTO],
                                SegmentationMasks.full((20, 20)), K1000,
                                (20, 20))
        masks = segment_planes(np.zeros((20, 20)), np.zeros((20, 20)), W)
        assert masks.n_planes == 1
        assert masks.masks.all()

    def test_oracle_latent_two_planes(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        masks = segment_planes(s["g"], s["f"], W)
        assert mask_accuracy(masks.labels(), s["truth"]) >= 0.95

    def test_data_cost_fidelity_at_texture(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        dc = plane_data_costs(s["g"], s["f"], W, texture_weighted=False)
        gx, gy = np.gradient(s["f"])
        strong = np.hypot(gx, gy) > np.quantile(np.hypot(gx, gy), 0.85)
        hits = np.argmin(dc, axis=-1)[strong] == s["truth"][strong]
        assert hits.mean() >= 0.9

    def test_huge_smoothness_collapses_to_one_label(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        masks = segment_planes(s["g"], s["f"], W, lam_l=1e6)
        labels = masks.labels()
        assert len(np.unique(labels)) == 1

    def test_costs_normalized_per_pixel(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        dc = plane_data_costs(s["g"], s["f"], W)
        assert dc.min() >= 0.0 and dc.max() <= 1.0


class TestAlternateRestore:
    def test_single_plane_equals_latent_estimation(self):
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        f = cartoon(60, 80, seed=8)
        g = blur_single_plane(f, tsf, FRONTO, K1000)
        state = alternate_restore(g, tsf, [FRONTO], K1000, iterations=1)
        W = build_blur_operator(tsf, [FRONTO], SegmentationMasks.full((60, 80)),
                                K1000, (60, 80))
        np.testing.assert_allclose(state.latent, estimate_latent(g, W),
                                   atol=1e-12)
        assert state.masks.n_planes == 1

    def test_final_mask_accuracy(self, two_plane_scene, two_plane_am):
        acc = mask_accuracy(two_plane_am.masks.labels(),
                            two_plane_scene["truth"])
        assert acc >= 0.9

    def test_mask_accuracy_improves_over_bootstrap(self, two_plane_scene,
                                                   two_plane_am):
        truth = two_plane_scene["truth"]
        accs = [mask_accuracy(m.labels(), truth)
                for m in two_plane_am.mask_history]
        assert all(b >= a - 1e-9 for a, b in zip(accs, accs[1:]))
        assert accs[-1] >= accs[0]

    def test_within_half_db_of_oracle_masks(self, two_plane_scene,
                                            two_plane_am):
        s = two_plane_scene
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            oracle = alternate_restore(s["g"], s["tsf"], s["planes"], K1000,
                                       iterations=1, masks=s["masks"])
        p_am = psnr(two_plane_am.latent, s["f"], border=8)
        p_or = psnr(oracle.latent, s["f"], border=8)
        assert abs(p_am - p_or) <= 0.5

    def test_restoration_gains_3db(self, two_plane_scene, two_plane_am):
        s = two_plane_scene
        assert psnr(two_plane_am.latent, s["f"], border=8) >= \
            psnr(s["g"], s["f"], border=8) + 3.0

    def test_masks_partition_every_iteration(self, two_plane_am):
        for m in two_plane_am.mask_history:
            assert m.masks.sum(axis=0).min() == 1
            assert m.masks.sum(axis=0).max() == 1

    def test_depth_map_composites_plane_depths(self, two_plane_scene,
                                               two_plane_am):
        s = two_plane_scene
        depth = two_plane_am.depth_map
        for plane, mask in zip(s["planes"], two_plane_am.masks.masks):
            expected = plane_depth_map(plane, K1000, SHAPE)
            np.testing.assert_allclose(depth[mask], expected[mask], atol=1e-12)

    def test_energy_trace_recorded(self, two_plane_am):
        assert len(two_plane_am.energy_trace) == 5
        assert all(np.isfinite(e) for e in two_plane_am.energy_trace)


class TestPlaneGuides:
    def test_guides_count_matches_planes(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            latents, guides = plane_guides(s["g"], W)
        assert len(latents) == len(guides) == 2

    def test_single_plane_operator_isolates_plane(self, two_plane_scene):
        s = two_plane_scene
        W = build_blur_operator(s["tsf"], s["planes"], s["masks"], K1000, SHAPE)
        W1 = single_plane_operator(W, 1)
        f = s["f"]
        np.testing.assert_allclose(W1.apply(f),
                                   blur_single_plane(f, s["tsf"], FAR, K1000),
                                   atol=1e-10)
