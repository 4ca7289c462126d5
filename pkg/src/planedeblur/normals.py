"""Plane-normal recovery from endpoint shift fields, and iterative RANSAC
discovery of the number of planes in the scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, PlaneParams
from .psf_analysis import KernelSample

RANSAC_THRESHOLD_DEG = 11.0
RANSAC_DRAWS = 200
EPSILON_C = 1e-3  # px; below this the axis carries no net translation
MIN_NZ = 0.3  # a visible scene plane cannot be near edge-on to the camera


class CollinearSamplesError(ValueError):
    """Sample locations are collinear; the shift system is rank-deficient."""


class TranslationDeficientAxisError(ValueError):
    """No net translation along an axis: the normal ratio is unidentifiable."""

    def __init__(self, axis: str, value: float):
        self.axis = axis
        self.value = value
        super().__init__(f"|c_{axis}| = {abs(value):.2e} < {EPSILON_C}: "
                         f"translation-deficient axis")


@dataclass(frozen=True)
class ShiftSystemSolution:
    """Least-squares coefficients of the affine shift model.

    shift_x(x, y) = a_x*x + b_x*y + c_x and likewise for shift_y; the two
    systems are solved independently.
    """

    coeffs_x: np.ndarray  # (a_x, b_x, c_x)
    coeffs_y: np.ndarray  # (a_y, b_y, c_y)
    residual_x: float
    residual_y: float

    @property
    def residual(self) -> float:
        return float(np.hypot(self.residual_x, self.residual_y))


@dataclass(frozen=True)
class PlaneHypothesis:
    """A recovered plane normal with the samples that support it."""

    normal: np.ndarray  # unit, nZ > 0
    inliers: list[int]  # indices into the input sample list
    refined: bool = True  # False marks the single-plane fallback


def solve_shift_system(samples: list[KernelSample]) -> ShiftSystemSolution:
    """Fit the affine shift model to >= 3 non-collinear samples."""
    if len(samples) < 3:
        raise ValueError(f"need at least 3 samples, got {len(samples)}")
    A = np.array([[s.location[0], s.location[1], 1.0] for s in samples])
    if np.linalg.matrix_rank(A) < 3:
        raise CollinearSamplesError("sample locations are collinear")
    shifts = np.array([s.shift for s in samples])
    cx, res_x, _, _ = np.linalg.lstsq(A, shifts[:, 0], rcond=None)
    cy, res_y, _, _ = np.linalg.lstsq(A, shifts[:, 1], rcond=None)
    rx = float(np.sqrt(res_x[0])) if len(res_x) else 0.0
    ry = float(np.sqrt(res_y[0])) if len(res_y) else 0.0
    return ShiftSystemSolution(cx, cy, rx, ry)


def normal_from_solution(sol: ShiftSystemSolution, K: Intrinsics) -> np.ndarray:
    """Normal direction from coefficient ratios: n ∝ (ν a_x/c_x, ν b_y/c_y, 1)."""
    a_x, _, c_x = sol.coeffs_x
    _, b_y, c_y = sol.coeffs_y
    if abs(c_x) < EPSILON_C:
        raise TranslationDeficientAxisError("x", c_x)
    if abs(c_y) < EPSILON_C:
        raise TranslationDeficientAxisError("y", c_y)
    nu = K.focal_length
    n = np.array([nu * a_x / c_x, nu * b_y / c_y, 1.0])
    return n / np.linalg.norm(n)


def angular_error(n1, n2) -> float:
    """Angle between two unit normals in degrees, folded to [0, 90]."""
    dot = abs(float(np.dot(n1, n2)))
    return float(np.degrees(np.arccos(np.clip(dot, -1.0, 1.0))))


def _try_normal(samples, K):
    try:
        return normal_from_solution(solve_shift_system(samples), K)
    except (CollinearSamplesError, TranslationDeficientAxisError):
        return None


def _perturbation_inlier(trio, candidate, normal, K, threshold_deg) -> bool:
    """Replace-one-of-three test: the candidate is an inlier when swapping it
    into the minimal sample leaves the re-estimated normal within threshold.

    The trio model must also predict the candidate's shift: normal-space
    stability alone cannot reject a tilted plane threaded exactly through two
    parallel planes at different depths, whose tell is the residual."""
    try:
        sol = solve_shift_system(trio)
    except CollinearSamplesError:
        return False
    mags = [float(np.hypot(*s.shift)) for s in trio]
    tol = max(0.35, 0.06 * float(np.median(mags)))
    if float(_shift_residuals(sol, [candidate])[0]) > tol:
        return False
    tested = False
    for drop in range(3):
        swapped = list(trio)
        swapped[drop] = candidate
        n = _try_normal(swapped, K)
        if n is None:
            continue
        tested = True
        if angular_error(n, normal) > threshold_deg:
            return False
    return tested


def _shift_residuals(sol: ShiftSystemSolution, candidates) -> np.ndarray:
    """Prediction error of the affine shift model per sample, sign-agnostic."""
    A = np.array([[s.location[0], s.location[1], 1.0] for s in candidates])
    pred = np.stack([A @ sol.coeffs_x, A @ sol.coeffs_y], axis=1)
    shifts = np.array([s.shift for s in candidates])
    return np.minimum(np.linalg.norm(pred - shifts, axis=1),
                      np.linalg.norm(pred + shifts, axis=1))


def _expand_consensus(samples, inliers, pool, K):
    """Grow an inlier set to the residual-consistent consensus.

    The perturbation test is conservative under endpoint noise and can leave
    a small, noise-aligned core whose refit is biased. Re-collect every pool
    sample whose shift the fitted model predicts within an adaptive tolerance
    (a multiple of the core's own residual level, so oracle-sharp planes keep
    a tight gate and never absorb a neighboring plane).
    """
    for _ in range(2):
        core = [samples[i] for i in inliers]
        try:
            sol = solve_shift_system(core)
        except CollinearSamplesError:
            return inliers
        tol = 3.0 * float(np.median(_shift_residuals(sol, core))) + 0.3
        res = _shift_residuals(sol, [samples[i] for i in pool])
        new = [i for i, r in zip(pool, res) if r <= tol]
        if len(new) < 3 or set(new) == set(inliers):
            break
        inliers = new
    return inliers


def ransac_planes(samples: list[KernelSample], K: Intrinsics,
                  threshold_deg: float = RANSAC_THRESHOLD_DEG,
                  min_inliers: int | None = None,
                  draws: int = RANSAC_DRAWS, seed: int = 0) -> list[PlaneHypothesis]:
    """Iteratively peel planes off the shift field with RANSAC.

    Flagged samples (degenerate or low-confidence) never participate. When no
    hypothesis reaches min_inliers at all, a single-plane fallback fitted to
    every usable sample is returned with refined=False.
    """
    usable = [i for i, s in enumerate(samples)
              if not s.degenerate and not s.low_confidence]
    if min_inliers is None:
        min_inliers = max(5, int(np.ceil(0.2 * len(usable))))
    if len(usable) < 3:
        raise ValueError(f"need at least 3 usable samples, got {len(usable)}")

    rng = np.random.default_rng(seed)
    remaining = list(usable)
    hypotheses: list[PlaneHypothesis] = []
    while len(remaining) >= max(min_inliers, 3):
        best = None  # (inlier count, -residual, inliers, normal)
        for _ in range(draws):
            trio_idx = rng.choice(len(remaining), size=3, replace=False)
            trio = [samples[remaining[t]] for t in trio_idx]
            normal = _try_normal(trio, K)
            if normal is None or abs(normal[2]) < MIN_NZ:
                continue
            inliers = [remaining[t] for t in trio_idx]
            for i in remaining:
                if i in inliers:
                    continue
                if _perturbation_inlier(trio, samples[i], normal, K, threshold_deg):
                    inliers.append(i)
            if len(inliers) < min_inliers:
                continue
            refit = _try_normal([samples[i] for i in inliers], K)
            if refit is None or abs(refit[2]) < MIN_NZ:
                continue
            residual = solve_shift_system([samples[i] for i in inliers]).residual
            key = (len(inliers), -residual)
            if best is None or key > best[0]:
                best = (key, sorted(inliers), refit)
        if best is None:
            break
        _, inliers, normal = best
        expanded = _expand_consensus(samples, inliers, remaining, K)
        refit = _try_normal([samples[i] for i in expanded], K)
        if refit is not None and abs(refit[2]) >= MIN_NZ:
            inliers, normal = sorted(expanded), refit
        hypotheses.append(PlaneHypothesis(normal, inliers))
        remaining = [i for i in remaining if i not in set(inliers)]
    if not hypotheses:
        normal = _try_normal([samples[i] for i in usable], K)
        if normal is None:
            normal = np.array([0.0, 0.0, 1.0])
        hypotheses.append(PlaneHypothesis(normal, list(usable), refined=False))
    return hypotheses


def normal_to_plane(normal: np.ndarray, scale: float = 1.0) -> PlaneParams:
    """Wrap a recovered unit normal as plane parameters at a given scale."""
    return PlaneParams.from_direction(tuple(normal), scale=scale)
