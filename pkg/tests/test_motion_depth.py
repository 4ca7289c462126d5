import numpy as np
import pytest

from planedeblur.geometry import Intrinsics, PlaneParams, PoseGrid
from planedeblur.motion_depth import (MotionMatrix, ScaleSet,
                                      build_motion_matrix,
                                      estimate_motion_and_depth, refine_scales,
                                      solve_tsf, stack_kernels)
from planedeblur.psf_analysis import KernelSample
from planedeblur.synthesis import (PSF, KernelRadiusError, TSF, psf_from_tsf)

K1000 = Intrinsics(1000.0)
RADIUS = 13


def make_grid():
    return PoseGrid.from_ranges((-0.008, 0.008, 5), (-0.008, 0.008, 5),
                                (0.0, 0.0, 1))


def kernel_samples(tsf, locations, plane):
    """Oracle KernelSamples for a plane: ground-truth PSFs at each location."""
    out = []
    for loc in locations:
        psf = psf_from_tsf(tsf, loc, plane, K1000, radius=RADIUS)
        out.append(KernelSample(loc, psf, (0.0, 0.0), (0.0, 0.0)))
    return out


LOCS = [(-120.0, -60.0), (100.0, 80.0), (20.0, -100.0), (-40.0, 40.0)]
FRONTO = PlaneParams((0.0, 0.0, 1.0))
INCLINED = PlaneParams.from_direction((1.0, 0.0, 2.0))


def three_pose_tsf(grid):
    idx = [grid.identity_index(), grid.nearest_index(0.004, 0.0, 0.0),
           grid.nearest_index(-0.004, 0.004, 0.0)]
    return TSF(grid, np.array(idx), np.array([0.5, 0.3, 0.2]))


class TestBuildMotionMatrix:
    def test_identity_pose_column_is_delta(self):
        grid = make_grid()
        M = build_motion_matrix(LOCS, [0] * len(LOCS), [INCLINED.normal], [1.0],
                                grid, K1000, RADIUS)
        delta = np.zeros(len(grid))
        delta[grid.identity_index()] = 1.0
        stacked = M.apply(delta).reshape(len(LOCS), 2 * RADIUS + 1, 2 * RADIUS + 1)
        for block in stacked:
            assert block[RADIUS, RADIUS] == pytest.approx(1.0)
            assert block.sum() == pytest.approx(1.0)

    def test_matches_psf_from_tsf(self):
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        M = build_motion_matrix(LOCS, [0] * len(LOCS), [INCLINED.normal], [1.0],
                                grid, K1000, RADIUS)
        stacked = M.apply(tsf.dense())
        oracle = stack_kernels([psf_from_tsf(tsf, loc, INCLINED, K1000,
                                             radius=RADIUS).kernel
                                for loc in LOCS])
        np.testing.assert_allclose(stacked, oracle, atol=1e-12)

    def test_block_columns_sum_to_one(self):
        grid = make_grid()
        M = build_motion_matrix(LOCS, [0] * len(LOCS), [FRONTO.normal], [1.0],
                                grid, K1000, RADIUS)
        cells = M.kernel_cells
        block = M.matrix[:cells].toarray()
        np.testing.assert_allclose(block.sum(axis=0), 1.0, atol=1e-12)

    def test_doubling_scale_doubles_translation_displacement(self):
        grid = make_grid()
        p = grid.nearest_index(0.004, 0.0, 0.0)
        radius = 18  # corner poses reach 16 px at scale 2
        size = 2 * radius + 1
        cols = np.arange(size)

        def centroid_x(scale):
            M = build_motion_matrix([(0.0, 0.0)], [0], [FRONTO.normal], [scale],
                                    grid, K1000, radius)
            col = np.asarray(M.matrix[:, p].todense()).reshape(size, size)
            return (col.sum(axis=0) * cols).sum() - radius

        assert centroid_x(2.0) == pytest.approx(2.0 * centroid_x(1.0), abs=1e-9)

    def test_displacement_beyond_radius_errors(self):
        grid = make_grid()
        with pytest.raises(KernelRadiusError):
            build_motion_matrix([(0.0, 0.0)], [0], [FRONTO.normal], [1.0],
                                grid, K1000, radius=5)

    def test_adjoint_matches_direct_correlation(self):
        grid = make_grid()
        M = build_motion_matrix(LOCS[:2], [0, 0], [INCLINED.normal], [1.0],
                                grid, K1000, RADIUS)
        rng = np.random.default_rng(0)
        k = rng.random(M.matrix.shape[0])
        direct = np.array([float(M.matrix[:, j].toarray().ravel() @ k)
                           for j in range(M.matrix.shape[1])])
        np.testing.assert_allclose(M.adjoint(k), direct, atol=1e-8)


class TestSolveTSF:
    def test_recovers_delta_tsf(self):
        grid = make_grid()
        true = TSF.delta(grid, grid.nearest_index(0.004, -0.004, 0.0))
        M = build_motion_matrix(LOCS, [0] * len(LOCS), [INCLINED.normal], [1.0],
                                grid, K1000, RADIUS)
        k = M.apply(true.dense())
        est = solve_tsf(M, k)
        assert est.dense()[true.indices[0]] >= 0.95

    def test_recovers_three_pose_support_and_weights(self):
        grid = make_grid()
        true = three_pose_tsf(grid)
        M = build_motion_matrix(LOCS, [0] * len(LOCS), [INCLINED.normal], [1.0],
                                grid, K1000, RADIUS)
        est = solve_tsf(M, M.apply(true.dense()), prune=1e-3)
        assert set(est.indices) == set(true.indices)
        np.testing.assert_allclose(np.sort(est.weights), np.sort(true.weights),
                                   atol=0.05)

    def test_huge_lambda_collapses_support(self):
        grid = make_grid()
        true = three_pose_tsf(grid)
        M = build_motion_matrix(LOCS, [0] * len(LOCS), [INCLINED.normal], [1.0],
                                grid, K1000, RADIUS)
        est = solve_tsf(M, M.apply(true.dense()), lam=1e3, prune=1e-3)
        assert len(est.indices) <= 2


class TestRefineScales:
    def setup_two_planes(self, s2):
        grid = make_grid()
        tsf = three_pose_tsf(grid)
        plane2 = PlaneParams(INCLINED.normal, scale=s2)
        samples = [kernel_samples(tsf, LOCS, FRONTO),
                   kernel_samples(tsf, [(60.0, -40.0), (-80.0, 90.0),
                                        (130.0, 10.0)], plane2)]
        normals = [FRONTO.normal, INCLINED.normal]
        return grid, tsf, samples, normals

    def test_recovers_true_scale(self):
        grid, tsf, samples, normals = self.setup_two_planes(1.05)
        scales = refine_scales(tsf.dense(), samples, normals, grid, K1000,
                               RADIUS, reference_index=0)
        assert scales == [1.0, 1.05]

    def test_same_depth_planes_give_unity(self):
        grid, tsf, samples, normals = self.setup_two_planes(1.0)
        scales = refine_scales(tsf.dense(), samples, normals, grid, K1000,
                               RADIUS, reference_index=0)
        assert scales == [1.0, 1.0]

    def test_identity_tsf_tie_breaks_to_unity(self):
        grid = make_grid()
        tsf = TSF.delta(grid)
        samples = [kernel_samples(tsf, LOCS, FRONTO),
                   kernel_samples(tsf, LOCS, PlaneParams(INCLINED.normal, 1.2))]
        scales = refine_scales(tsf.dense(), samples,
                               [FRONTO.normal, INCLINED.normal], grid, K1000,
                               RADIUS, reference_index=0)
        assert scales[1] == 1.0


class TestScaleSet:
    def test_default_contains_unity_and_bounds(self):
        s = ScaleSet()
        assert 1.0 in s.values
        assert s.values[0] == pytest.approx(0.70)
        assert s.values[-1] == pytest.approx(1.40)

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            ScaleSet(np.array([1.0, 1.0, 1.1]))

    def test_rejects_missing_unity(self):
        with pytest.raises(ValueError):
            ScaleSet(np.array([0.9, 1.1]))


class TestEstimateMotionAndDepth:
    def test_single_plane_round_trip(self):
        grid = make_grid()
        true = TSF.delta(grid, grid.nearest_index(0.004, 0.0, 0.0))
        samples = [kernel_samples(true, LOCS, FRONTO)]
        est = estimate_motion_and_depth(samples, [FRONTO.normal], grid, K1000,
                                        radius=RADIUS)
        assert est.scales == [1.0]
        assert est.tsf.dense()[true.indices[0]] >= 0.95

    def test_two_planes_exact_scale_recovery(self):
        grid = make_grid()
        true = three_pose_tsf(grid)
        plane2 = PlaneParams(INCLINED.normal, scale=1.25)
        samples = [kernel_samples(true, LOCS, FRONTO),
                   kernel_samples(true, [(70.0, -30.0), (-90.0, 60.0),
                                         (10.0, 120.0)], plane2)]
        est = estimate_motion_and_depth(samples, [FRONTO.normal, INCLINED.normal],
                                        grid, K1000, radius=RADIUS)
        assert est.scales == [1.0, 1.25]
        assert set(est.tsf.indices) == set(true.indices)
        # stacked residual at the solution
        M = build_motion_matrix(
            [s.location for g in samples for s in g],
            [0] * len(LOCS) + [1] * 3,
            [FRONTO.normal, INCLINED.normal], est.scales, grid, K1000, RADIUS)
        k = stack_kernels([s.psf.kernel for g in samples for s in g])
        assert float(np.sum((k - M.apply(est.tsf.dense())) ** 2)) < 1e-3

    def test_out_of_range_scale_clamps_with_warning(self):
        # true scale 1.5 exceeds the search range and has no on-grid pose
        # alias, so the search must stop at the 1.40 boundary
        grid = make_grid()
        true = three_pose_tsf(grid)
        plane2 = PlaneParams(FRONTO.normal, scale=1.5)
        samples = [kernel_samples(true, LOCS, FRONTO),
                   kernel_samples(true, LOCS, plane2)]
        est = estimate_motion_and_depth(samples, [FRONTO.normal, FRONTO.normal],
                                        grid, K1000, radius=RADIUS)
        assert est.scales[1] == pytest.approx(1.40)
        assert est.scale_warning

    def test_objective_trace_non_increasing(self):
        grid = make_grid()
        true = three_pose_tsf(grid)
        plane2 = PlaneParams(INCLINED.normal, scale=1.1)
        samples = [kernel_samples(true, LOCS, FRONTO),
                   kernel_samples(true, LOCS, plane2)]
        est = estimate_motion_and_depth(samples, [FRONTO.normal, INCLINED.normal],
                                        grid, K1000, radius=RADIUS)
        trace = np.array(est.objective_trace)
        assert np.all(np.diff(trace) <= 1e-9)

    def test_gauge_equivalent_inputs_give_same_estimate(self):
        # scale-2 plane with pose t equals scale-1 plane with pose 2t
        grid = make_grid()
        tsf_half = TSF.delta(grid, grid.nearest_index(0.004, 0.0, 0.0))
        tsf_full = TSF.delta(grid, grid.nearest_index(0.008, 0.0, 0.0))
        k1 = psf_from_tsf(tsf_half, LOCS[0], PlaneParams(FRONTO.normal, 2.0),
                          K1000, RADIUS)
        k2 = psf_from_tsf(tsf_full, LOCS[0], FRONTO, K1000, RADIUS)
        np.testing.assert_allclose(k1.kernel, k2.kernel, atol=1e-12)

    def test_flipped_normals_resolved_by_sign_search(self):
        grid = make_grid()
        true = three_pose_tsf(grid)
        plane2 = PlaneParams(INCLINED.normal, scale=1.25)
        samples = [kernel_samples(true, LOCS, FRONTO),
                   kernel_samples(true, [(70.0, -30.0), (-90.0, 60.0),
                                         (10.0, 120.0)], plane2)]
        flipped = [FRONTO.normal,
                   np.array([-INCLINED.normal[0], -INCLINED.normal[1],
                             INCLINED.normal[2]])]
        est = estimate_motion_and_depth(samples, flipped, grid, K1000,
                                        radius=RADIUS)
        assert est.scales == [1.0, 1.25]

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            estimate_motion_and_depth([[]], [FRONTO.normal], make_grid(), K1000)
