"""Joint recovery of camera motion (TSF weights) and per-plane depth scales
from inlier PSFs, by alternating a sparse nonnegative least-squares solve with
an exhaustive discrete scale search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .geometry import Intrinsics, PlaneParams, PoseGrid
from .psf_analysis import KernelSample
from .synthesis import TSF, KernelRadiusError, pose_displacements

LAMBDA_OMEGA = 0.1
OUTER_ITERATIONS = 5


@dataclass(frozen=True)
class ScaleSet:
    """Candidate depth-scale grid around 1."""

    values: np.ndarray = field(default_factory=lambda: np.round(
        np.arange(0.70, 1.40 + 1e-9, 0.025), 10))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(np.diff(v) <= 0):
            raise ValueError("scale set must be strictly increasing")
        if not np.any(np.abs(v - 1.0) < 1e-12):
            raise ValueError("scale set must contain 1.0")
        object.__setattr__(self, "values", v)

    def nearest(self, s: float) -> float:
        return float(self.values[np.argmin(np.abs(self.values - s))])


@dataclass(frozen=True)
class MotionMatrix:
    """Sparse operator mapping pose weights to stacked per-sample kernels."""

    matrix: sp.csr_matrix  # (n_samples * cells, n_poses)
    grid: PoseGrid
    radius: int
    n_samples: int

    @property
    def kernel_cells(self) -> int:
        return (2 * self.radius + 1) ** 2

    def apply(self, omega: np.ndarray) -> np.ndarray:
        return self.matrix @ omega

    def adjoint(self, stacked: np.ndarray) -> np.ndarray:
        return self.matrix.T @ stacked


@dataclass
class MotionDepthEstimate:
    """Alternation output: motion distribution, plane scales, and diagnostics."""

    tsf: TSF
    scales: list[float]
    reference_index: int
    objective_trace: list[float]
    converged: bool
    scale_warning: bool = False  # a scale landed on the boundary of the set
    normals: list[np.ndarray] | None = None  # sign-resolved winning variant


def _splat_columns(disp: np.ndarray, radius: int):
    """Bilinear splat of each displacement row into kernel-cell indices.

    Returns (rows, cols, vals) triplets where rows are flattened kernel cells
    and cols index the displacement (pose) that produced them.
    """
    size = 2 * radius + 1
    max_disp = np.max(np.abs(disp)) if len(disp) else 0.0
    if max_disp > radius - 1 + 1e-12:
        raise KernelRadiusError(int(np.ceil(max_disp)) + 1, radius)
    u = disp[:, 0] + radius
    v = disp[:, 1] + radius
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = u - u0
    fv = v - v0
    cols = np.tile(np.arange(len(disp)), 4)
    rows = np.concatenate([v0 * size + u0, v0 * size + u0 + 1,
                           (v0 + 1) * size + u0, (v0 + 1) * size + u0 + 1])
    vals = np.concatenate([(1 - fv) * (1 - fu), (1 - fv) * fu,
                           fv * (1 - fu), fv * fu])
    return rows, cols, vals


def build_motion_matrix(locations, plane_indices, normals, scales,
                        grid: PoseGrid, K: Intrinsics, radius: int,
                        anchor_offsets=None) -> MotionMatrix:
    """Stack per-sample pose-to-kernel splat operators into one sparse matrix.

    Column p of block j is the splatted unit mass at the displacement induced
    by pose p at sample j's location on its assigned plane. anchor_offsets
    (one (dx, dy) per sample) shift displacements to match kernels whose
    translation gauge was fixed by centroid centering.
    """
    locations = list(locations)
    plane_indices = list(plane_indices)
    if len(locations) != len(plane_indices):
        raise ValueError("one plane index per sample location required")
    if anchor_offsets is None:
        anchor_offsets = [(0.0, 0.0)] * len(locations)
    poses = grid.poses()
    cells = (2 * radius + 1) ** 2
    rows, cols, vals = [], [], []
    for j, (loc, pi) in enumerate(zip(locations, plane_indices)):
        plane = PlaneParams.from_direction(tuple(normals[pi]), scale=scales[pi])
        disp = pose_displacements(poses, loc, plane, K)
        disp = disp - np.asarray(anchor_offsets[j], dtype=float)
        r, c, v = _splat_columns(disp, radius)
        rows.append(r + j * cells)
        cols.append(c)
        vals.append(v)
    matrix = sp.csr_matrix((np.concatenate(vals),
                            (np.concatenate(rows), np.concatenate(cols))),
                           shape=(len(locations) * cells, len(grid)))
    return MotionMatrix(matrix, grid, radius, len(locations))


def stack_kernels(kernels) -> np.ndarray:
    """Flatten a list of equal-radius kernels into the stacked PSF vector."""
    arrs = [np.asarray(k, dtype=float).ravel() for k in kernels]
    sizes = {a.size for a in arrs}
    if len(sizes) != 1:
        raise ValueError("all kernels must share one radius")
    return np.concatenate(arrs)


def _solve_omega(M: MotionMatrix, k: np.ndarray, lam: float = LAMBDA_OMEGA,
                 rho: float = 1.0, tol: float = 1e-4, max_iter: int = 300):
    """ADMM for min ||k - M w||^2 + lam*||w||_1 s.t. w >= 0 (w unnormalized)."""
    A = M.matrix
    n = A.shape[1]
    H = (2.0 * (A.T @ A)).toarray() + rho * np.eye(n)
    factor = cho_factor(H)
    Atk2 = 2.0 * (A.T @ k)
    x = np.zeros(n)
    z = np.zeros(n)
    u = np.zeros(n)
    converged = False
    for _ in range(max_iter):
        x = cho_solve(factor, Atk2 + rho * (z - u))
        z_old = z
        z = np.maximum(0.0, x + u - lam / rho)
        u = u + x - z
        primal = np.linalg.norm(x - z)
        dual = rho * np.linalg.norm(z - z_old)
        if primal < tol and dual < tol:
            converged = True
            break
    return z, converged


def solve_tsf(M: MotionMatrix, k: np.ndarray, lam: float = LAMBDA_OMEGA,
              prune: float = 1e-6) -> TSF:
    """Sparse nonnegative TSF from stacked kernels; weights renormalized."""
    omega, converged = _solve_omega(M, k, lam)
    if omega.sum() <= prune:
        return TSF.delta(M.grid)
    tsf = TSF.from_dense(M.grid, np.where(omega > prune, omega, 0.0))
    if not converged:
        import warnings
        warnings.warn("TSF solve stopped at iteration cap; best iterate kept")
    return tsf


def refine_scales(omega: np.ndarray, samples_by_plane, normals,
                  grid: PoseGrid, K: Intrinsics, radius: int,
                  reference_index: int, scale_set: ScaleSet | None = None,
                  anchors_by_plane=None) -> list[float]:
    """Exhaustive per-plane scale search at fixed motion weights.

    Each non-reference plane independently picks the scale minimizing its own
    stacked kernel residual; ties break toward 1.0.
    """
    if scale_set is None:
        scale_set = ScaleSet()
    scales = []
    for pi, samples in enumerate(samples_by_plane):
        if pi == reference_index or not samples:
            scales.append(1.0)
            continue
        locs = [s.location for s in samples]
        kern = stack_kernels([s.psf.kernel for s in samples])
        anchors = anchors_by_plane[pi] if anchors_by_plane is not None else None
        best = (np.inf, np.inf, 1.0)
        for s in scale_set.values:
            M = build_motion_matrix(locs, [0] * len(locs), [normals[pi]], [s],
                                    grid, K, radius, anchor_offsets=anchors)
            cost = float(np.sum((kern - M.apply(omega)) ** 2))
            key = (cost, abs(s - 1.0), float(s))
            if key < best:
                best = key
        scales.append(best[2])
    return scales


def _stacked_setup(samples_by_plane, normals, scales, grid, K, radius,
                   anchors_by_plane=None):
    locs, plane_idx, kernels, anchors = [], [], [], []
    for pi, samples in enumerate(samples_by_plane):
        for j, s in enumerate(samples):
            locs.append(s.location)
            plane_idx.append(pi)
            kernels.append(s.psf.kernel)
            if anchors_by_plane is not None:
                anchors.append(anchors_by_plane[pi][j])
    M = build_motion_matrix(locs, plane_idx, normals, scales, grid, K, radius,
                            anchor_offsets=anchors if anchors else None)
    return M, stack_kernels(kernels)


def _objective(M, k, omega, lam):
    return float(np.sum((k - M.apply(omega)) ** 2) + lam * np.sum(np.abs(omega)))


def _run_alternation(samples_by_plane, normals, grid, K, radius,
                     reference_index, scale_set, lam, outer_iters):
    scales = [1.0] * len(samples_by_plane)
    omega = None
    trace = []
    converged = False
    for _ in range(outer_iters):
        M, k = _stacked_setup(samples_by_plane, normals, scales, grid, K, radius)
        candidate, _ = _solve_omega(M, k, lam)
        obj = _objective(M, k, candidate, lam)
        if trace and obj > trace[-1] + 1e-12:
            # keep the previous iterate: the new scale/motion pair regressed
            trace.append(trace[-1])
            converged = True
            break
        omega = candidate
        trace.append(obj)
        new_scales = refine_scales(omega, samples_by_plane, normals, grid, K,
                                   radius, reference_index, scale_set)
        if new_scales == scales:
            converged = True
            break
        scales = new_scales
    return omega, scales, trace, converged


def estimate_motion_and_depth(samples_by_plane, normals, grid: PoseGrid,
                              K: Intrinsics, radius: int = 20,
                              scale_set: ScaleSet | None = None,
                              lam: float = LAMBDA_OMEGA,
                              outer_iters: int = OUTER_ITERATIONS,
                              resolve_sign: bool = True) -> MotionDepthEstimate:
    """Alternate TSF estimation and scale refinement from inlier kernels.

    The plane with the most inliers is the reference (scale fixed at 1). When
    resolve_sign is set, the globally sign-flipped normals (the shift-field
    ambiguity) are also evaluated and the lower-objective reading is kept.
    """
    if scale_set is None:
        scale_set = ScaleSet()
    counts = [len(s) for s in samples_by_plane]
    if sum(counts) == 0:
        raise ValueError("no inlier samples")
    reference_index = int(np.argmax(counts))
    normals = [np.asarray(n, dtype=float) for n in normals]
    variants = [normals]
    if resolve_sign and any(abs(n[0]) + abs(n[1]) > 1e-12 for n in normals):
        variants.append([np.array([-n[0], -n[1], n[2]]) for n in normals])
    results = []
    for variant in variants:
        omega, scales, trace, conv = _run_alternation(
            samples_by_plane, variant, grid, K, radius, reference_index,
            scale_set, lam, outer_iters)
        results.append((trace[-1], omega, scales, trace, conv, variant))
    obj, omega, scales, trace, conv, winner = min(results, key=lambda r: r[0])
    if omega is None or omega.sum() <= 1e-12:
        tsf = TSF.delta(grid)
    else:
        tsf = TSF.from_dense(grid, np.where(omega > 1e-6 * omega.max(),
                                            omega, 0.0))
    lo, hi = scale_set.values[0], scale_set.values[-1]
    warning = any(s in (lo, hi) for i, s in enumerate(scales)
                  if i != reference_index and len(samples_by_plane[i]) > 0)
    return MotionDepthEstimate(tsf, scales, reference_index, trace, conv,
                               scale_warning=warning, normals=winner)
