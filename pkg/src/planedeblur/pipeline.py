"""End-to-end orchestration: blurred image in, restored image + depth map +
masks + metrics out, with every intermediate stage reusable on its own.

Stage order follows the estimation chain: per-patch kernels -> endpoint shift
field -> RANSAC plane peeling -> joint motion/depth alternation -> alternating
restoration (latent image + plane masks). Kernels can come from the sidecar
oracle field or from the in-repo blind estimator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Intrinsics, PlaneParams, PoseGrid
from .metrics import luminance, mask_accuracy, psnr, ssim
from .motion_depth import (MotionDepthEstimate, ScaleSet, build_motion_matrix,
                           estimate_motion_and_depth, refine_scales,
                           solve_tsf, stack_kernels)
from .normals import PlaneHypothesis, angular_error, ransac_planes
from .psf_analysis import KernelSample, PatchGrid, blind_psf_source, shift_field
from .restoration import (AM_ITERATIONS, LAMBDA_F, LAMBDA_L, RestorationState,
                          alternate_restore)
from .scenes import SceneRender
from .synthesis import (PSF, SegmentationMasks, pose_displacements,
                        psf_from_tsf)


@dataclass(frozen=True)
class ExperimentConfig:
    """Tunables of the reproduction protocol with their default values."""

    focal_length: float = 1000.0
    patch_size: int = 120
    patch_overlap: int = 50
    kernel_radius: int = 13
    ransac_threshold_deg: float = 11.0
    lam_omega: float = 0.1
    lam_f: float = LAMBDA_F
    lam_l: float = LAMBDA_L
    smoothness_base: float = 0.8
    iterations: int = AM_ITERATIONS
    scale_range: tuple = (0.70, 1.40, 0.025)
    seed: int = 0
    jobs: int = 1

    @classmethod
    def from_scene(cls, scene_cfg: dict, **overrides) -> "ExperimentConfig":
        """Adopt the per-scene geometry knobs (focal, patch, kernel radius)."""
        base = cls(focal_length=scene_cfg["focal_length"],
                   patch_size=scene_cfg["patch"]["size"],
                   patch_overlap=scene_cfg["patch"]["overlap"],
                   kernel_radius=scene_cfg["kernel_radius"],
                   scale_range=scene_cfg.get("scale_range", (0.70, 1.40, 0.025)))
        return replace(base, **overrides)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal_length)

    def scale_set(self) -> ScaleSet:
        lo, hi, step = self.scale_range
        return ScaleSet(np.round(np.arange(lo, hi + 1e-9, step), 10))


# ---------------------------------------------------------------------------
# PSF sources
# ---------------------------------------------------------------------------

def psf_field_source(locations: np.ndarray, kernels: np.ndarray):
    """PSF source reading kernels from a stored field (sidecar oracle)."""
    locations = np.asarray(locations, dtype=float)
    kernels = np.asarray(kernels, dtype=float)

    def source(patch, center):
        d = np.hypot(locations[:, 0] - center[0], locations[:, 1] - center[1])
        i = int(np.argmin(d))
        if d[i] > 1.0:
            raise ValueError(f"no stored kernel near patch center {center} "
                             f"(closest is {d[i]:.1f} px away)")
        return PSF(kernels[i], (float(center[0]), float(center[1])))

    return source


def oracle_psf_field(render: SceneRender, config: ExperimentConfig):
    """Ground-truth kernels at every patch center, for the sidecar."""
    grid = PatchGrid(render.blurred.shape[:2], config.patch_size,
                     config.patch_overlap)
    K = render.intrinsics
    shape = render.blurred.shape[:2]
    locations, kernels = [], []
    for center in grid.centers(K):
        idx = render.scene.plane_at(center[0], center[1], shape)
        psf = psf_from_tsf(render.tsf, center, render.scene.planes[idx], K,
                           radius=config.kernel_radius)
        locations.append(center)
        kernels.append(psf.kernel)
    return np.array(locations), np.array(kernels)


# ---------------------------------------------------------------------------
# normals stage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalReport:
    """Shift-field samples and the plane hypotheses peeled from them."""

    samples: list[KernelSample]
    hypotheses: list[PlaneHypothesis]

    @property
    def n_planes(self) -> int:
        return len(self.hypotheses)

    @property
    def normals(self) -> list[np.ndarray]:
        return [h.normal for h in self.hypotheses]


def estimate_scene_normals(g: np.ndarray, config: ExperimentConfig,
                           psf_source=None) -> NormalReport:
    """Shift field + RANSAC plane peeling on a blurred image."""
    g = luminance(g)
    if psf_source is None:
        psf_source = blind_psf_source(max_radius=config.kernel_radius)
    grid = PatchGrid(g.shape, config.patch_size, config.patch_overlap)
    K = config.intrinsics()
    samples = shift_field(g, grid, psf_source, K)
    hypotheses = ransac_planes(samples, K,
                               threshold_deg=config.ransac_threshold_deg,
                               seed=config.seed)
    return NormalReport(samples, hypotheses)


def group_samples(report: NormalReport) -> list[list[KernelSample]]:
    """Inlier kernel samples of each hypothesis, in hypothesis order."""
    return [[report.samples[i] for i in h.inliers] for h in report.hypotheses]


# ---------------------------------------------------------------------------
# motion stage
# ---------------------------------------------------------------------------

def recover_motion(report: NormalReport, pose_grid: PoseGrid,
                   config: ExperimentConfig,
                   centroid_gauge: bool = False) -> MotionDepthEstimate:
    """Joint TSF + depth-scale alternation over the grouped inlier kernels.

    centroid_gauge handles kernels whose translation origin was lost to
    centroid centering (the blind estimator's gauge): after a first pass, the
    predicted kernel centroids become per-sample anchor offsets and the
    motion weights and scales are re-solved against the shifted model.
    """
    groups = group_samples(report)
    K = config.intrinsics()
    est = estimate_motion_and_depth(groups, report.normals, pose_grid, K,
                                    radius=config.kernel_radius,
                                    scale_set=config.scale_set(),
                                    lam=config.lam_omega)
    if not centroid_gauge:
        return est

    omega = est.tsf.dense()
    poses = pose_grid.poses()
    anchors_by_plane = []
    for pi, samples in enumerate(groups):
        plane = PlaneParams.from_direction(tuple(est.normals[pi]),
                                           scale=est.scales[pi])
        anchors = []
        for s in samples:
            disp = pose_displacements(poses, s.location, plane, K)
            anchors.append(tuple(omega @ disp))
        anchors_by_plane.append(anchors)

    locs, plane_idx, kernels, anchors = [], [], [], []
    for pi, samples in enumerate(groups):
        for s, a in zip(samples, anchors_by_plane[pi]):
            locs.append(s.location)
            plane_idx.append(pi)
            kernels.append(s.psf.kernel)
            anchors.append(a)
    M = build_motion_matrix(locs, plane_idx, est.normals, est.scales,
                            pose_grid, K, config.kernel_radius,
                            anchor_offsets=anchors)
    tsf = solve_tsf(M, stack_kernels(kernels), lam=config.lam_omega)
    scales = refine_scales(tsf.dense(), groups, est.normals, pose_grid, K,
                           config.kernel_radius, est.reference_index,
                           scale_set=config.scale_set(),
                           anchors_by_plane=anchors_by_plane)
    return replace_estimate(est, tsf, scales)


def replace_estimate(est: MotionDepthEstimate, tsf, scales) -> MotionDepthEstimate:
    return MotionDepthEstimate(tsf, scales, est.reference_index,
                               est.objective_trace, est.converged,
                               est.scale_warning, est.normals)


def recovered_planes(est: MotionDepthEstimate) -> list[PlaneParams]:
    """Plane parameters (sign-resolved normal + grid scale) per hypothesis."""
    return [PlaneParams.from_direction(tuple(n), scale=s)
            for n, s in zip(est.normals, est.scales)]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class DeblurResult:
    """Everything the deblur command writes or reports."""

    latent: np.ndarray
    masks: SegmentationMasks
    depth_map: np.ndarray
    tsf: object
    planes: list[PlaneParams]
    reference_index: int
    report: NormalReport
    motion: MotionDepthEstimate
    state: RestorationState
    runtimes: dict = field(default_factory=dict)


def run_deblur(g: np.ndarray, pose_grid: PoseGrid, config: ExperimentConfig,
               psf_source=None,
               masks: SegmentationMasks | None = None) -> DeblurResult:
    """Blind deblurring of a single image.

    psf_source supplies per-patch kernels (sidecar oracle field or the blind
    estimator); everything downstream — plane count, normals, motion, depth
    scales, masks, and the latent image — is estimated. Passing masks skips
    the segmentation half of the alternation (the oracle-mask ablation).
    """
    g = luminance(g)
    runtimes = {}
    t0 = time.perf_counter()
    report = estimate_scene_normals(g, config, psf_source)
    runtimes["normals_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    centroid = psf_source is None  # blind kernels carry the centroid gauge
    motion = recover_motion(report, pose_grid, config, centroid_gauge=centroid)
    runtimes["motion_s"] = time.perf_counter() - t0

    planes = recovered_planes(motion)
    t0 = time.perf_counter()
    state = alternate_restore(g, motion.tsf, planes, config.intrinsics(),
                              background_index=motion.reference_index,
                              iterations=config.iterations,
                              lam_f=config.lam_f, lam_l=config.lam_l,
                              masks=masks)
    runtimes["restore_s"] = time.perf_counter() - t0
    return DeblurResult(state.latent, state.masks, state.depth_map,
                        motion.tsf, planes, motion.reference_index,
                        report, motion, state, runtimes)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def best_label_permutation(labels: np.ndarray, truth: np.ndarray,
                           n_planes: int):
    """Relabeling of `labels` that best matches `truth` (plane order is
    arbitrary on the estimation side). Returns (accuracy, permuted labels)."""
    import itertools

    best = (-1.0, labels)
    for perm in itertools.permutations(range(n_planes)):
        mapped = np.asarray(perm)[labels]
        acc = mask_accuracy(mapped, truth)
        if acc > best[0]:
            best = (acc, mapped)
    return best


def metrics_report(restored: np.ndarray, reference: np.ndarray,
                   blurred: np.ndarray | None = None, border: int = 0,
                   labels: np.ndarray | None = None,
                   truth_labels: np.ndarray | None = None,
                   normals=None, true_normals=None,
                   runtimes: dict | None = None) -> dict:
    """MetricsReport as a JSON-ready dict; optional fields appear only when
    their inputs are given. PSNR/SSIM ignore a border of boundary-fill pixels."""
    out = {
        "psnr_db": psnr(restored, reference, border=border),
        "ssim": ssim(restored, reference, border=border),
        "border_px": border,
    }
    if blurred is not None:
        out["psnr_blurred_db"] = psnr(blurred, reference, border=border)
        out["psnr_gain_db"] = out["psnr_db"] - out["psnr_blurred_db"]
    if labels is not None and truth_labels is not None:
        n = int(max(labels.max(), truth_labels.max())) + 1
        acc, _ = best_label_permutation(np.asarray(labels),
                                        np.asarray(truth_labels), n)
        out["mask_accuracy"] = acc
    if normals is not None and true_normals is not None:
        errs = _matched_angular_errors(normals, true_normals)
        out["angular_errors_deg"] = errs
        out["mean_angular_error_deg"] = float(np.mean(errs)) if errs else None
    if runtimes:
        out["runtimes"] = {k: float(v) for k, v in runtimes.items()}
    return out


def _matched_angular_errors(normals, true_normals) -> list[float]:
    """Mean-minimizing assignment of estimated to true normals (N <= 3)."""
    import itertools

    normals = [np.asarray(n, dtype=float) for n in normals]
    true_normals = [np.asarray(n, dtype=float) for n in true_normals]
    n = min(len(normals), len(true_normals))
    if n == 0:
        return []
    best = None
    for perm in itertools.permutations(range(len(true_normals)), n):
        errs = [angular_error(normals[i], true_normals[j])
                for i, j in zip(range(n), perm)]
        if best is None or np.mean(errs) < np.mean(best):
            best = errs
    return [float(e) for e in best]
