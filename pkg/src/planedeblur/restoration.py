"""Latent-image restoration and plane-segmentation recovery by alternating
minimization, plus the L0 gradient-sparsity guidance filter."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .geometry import (Intrinsics, PlaneParams, homography_exact,
                       plane_depth_map, warp_matrix)
from .mrf import alpha_expansion, mrf_energy, smoothness_cost
from .synthesis import TSF, SegmentationMasks

LAMBDA_F = 0.002
# the paper gives no lambda_l; 4.0 (with [0,1]-normalized, texture-weighted
# data costs and a 25x25 window) keeps label islands out of textured areas
LAMBDA_L = 4.0
SMOOTHNESS_BASE = 0.8
DC_WINDOW = 25
AM_ITERATIONS = 5


@dataclass(frozen=True)
class BlurOperator:
    """Mask-composited multi-plane blur W = sum_i diag(mask_i) W_i.

    plane_matrices holds the per-plane single-plane blur operators W_i; the
    composite and its transpose are cached for the quadratic solver.
    """

    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix
    plane_matrices: list
    shape: tuple[int, int]

    def apply(self, f: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(f, float).ravel()).reshape(self.shape)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return (self.matrix_t @ np.asarray(y, float).ravel()).reshape(self.shape)

    def apply_plane(self, i: int, f: np.ndarray) -> np.ndarray:
        return (self.plane_matrices[i] @
                np.asarray(f, float).ravel()).reshape(self.shape)


def build_blur_operator(tsf: TSF, planes: list[PlaneParams],
                        masks: SegmentationMasks, K: Intrinsics,
                        shape: tuple[int, int]) -> BlurOperator:
    """Assemble sparse per-plane warp sums and their masked composite."""
    if len(planes) != masks.n_planes:
        raise ValueError(f"{len(planes)} planes but {masks.n_planes} masks")
    if masks.masks.shape[1:] != tuple(shape):
        raise ValueError("mask shape does not match the image shape")
    plane_matrices = []
    for plane in planes:
        Wi = None
        for pose, w in zip(tsf.poses(), tsf.weights):
            term = w * warp_matrix(homography_exact(pose, plane, K), shape, K)
            Wi = term if Wi is None else Wi + term
        plane_matrices.append(Wi.tocsr())
    n = shape[0] * shape[1]
    W = sp.csr_matrix((n, n))
    for Wi, mask in zip(plane_matrices, masks.masks):
        W = W + sp.diags(mask.ravel().astype(float)) @ Wi
    W = W.tocsr()
    return BlurOperator(W, W.T.tocsr(), plane_matrices, tuple(shape))


def _gradient_matrices(shape):
    """Forward-difference operators with replicate (Neumann) boundary."""
    h, w = shape
    ex = sp.eye(w, format="csr")
    dx1 = sp.diags([-np.ones(w), np.ones(w - 1)], [0, 1], format="lil")
    dx1[-1, -1] = 0.0
    ey = sp.eye(h, format="csr")
    dy1 = sp.diags([-np.ones(h), np.ones(h - 1)], [0, 1], format="lil")
    dy1[-1, -1] = 0.0
    Dx = sp.kron(ey, dx1.tocsr(), format="csr")
    Dy = sp.kron(dy1.tocsr(), ex, format="csr")
    return Dx, Dy


def estimate_latent(g: np.ndarray, W: BlurOperator, lam_f: float = LAMBDA_F,
                    rho: float = 1.0, outer_iters: int = 100,
                    tol: float = 1e-4, cg_iters: int = 25) -> np.ndarray:
    """Deconvolve min ||Wf - g||^2 + lam_f ||grad f||_1 by ADMM.

    The gradient is split into an auxiliary variable handled by soft
    shrinkage; the quadratic step runs conjugate gradients on the normal
    equations. Color images share one gradient support across channels.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim == 3:
        return np.stack([estimate_latent(g[..., c], W, lam_f, rho,
                                         outer_iters, tol, cg_iters)
                         for c in range(g.shape[2])], axis=-1)
    if g.shape != W.shape:
        raise ValueError("image shape does not match the operator")
    n = g.size
    Dx, Dy = _gradient_matrices(g.shape)
    A = W.matrix
    At = W.matrix_t
    DtD = (Dx.T @ Dx + Dy.T @ Dy).tocsr()

    def matvec(f):
        return 2.0 * (At @ (A @ f)) + rho * (DtD @ f)

    lin = sp.linalg.LinearOperator((n, n), matvec=matvec)
    Atg2 = 2.0 * (At @ g.ravel())
    f = g.ravel().copy()
    zx = np.zeros(n)
    zy = np.zeros(n)
    ux = np.zeros(n)
    uy = np.zeros(n)
    converged = False
    for _ in range(outer_iters):
        rhs = Atg2 + rho * (Dx.T @ (zx - ux) + Dy.T @ (zy - uy))
        f_new, _ = cg(lin, rhs, x0=f, maxiter=cg_iters, rtol=1e-8)
        gx = Dx @ f_new
        gy = Dy @ f_new
        # isotropic shrinkage of the joint gradient magnitude
        mag = np.hypot(gx + ux, gy + uy)
        scale = np.maximum(mag - lam_f / rho, 0.0) / np.maximum(mag, 1e-12)
        zx = scale * (gx + ux)
        zy = scale * (gy + uy)
        ux += gx - zx
        uy += gy - zy
        change = np.linalg.norm(f_new - f) / max(np.linalg.norm(f), 1e-12)
        f = f_new
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn("latent estimation hit the iteration cap; "
                      "best iterate returned")
    return f.reshape(g.shape)


def l0_smooth(image: np.ndarray, kappa: float, beta_max_factor: float = 1e5,
              beta_rate: float = 2.0) -> np.ndarray:
    """L0 gradient minimization: ||u - image||^2 + kappa * #{grad u != 0}.

    Half-quadratic splitting with a hard gradient threshold and an FFT
    quadratic step, continuing beta from 2*kappa up to beta_max_factor*kappa.
    """
    image = np.asarray(image, dtype=float)
    if kappa <= 0:
        return image.copy()
    if image.ndim == 3:
        return np.stack([l0_smooth(image[..., c], kappa, beta_max_factor,
                                   beta_rate) for c in range(image.shape[2])],
                        axis=-1)
    h, w = image.shape
    otf_x = np.fft.fft2(np.array([[1.0, -1.0]]), s=(h, w))
    otf_y = np.fft.fft2(np.array([[1.0], [-1.0]]), s=(h, w))
    denom_grad = np.abs(otf_x) ** 2 + np.abs(otf_y) ** 2
    F_img = np.fft.fft2(image)
    u = image.copy()
    beta = 2.0 * kappa
    while beta < beta_max_factor * kappa:
        gx = np.roll(u, -1, axis=1) - u
        gy = np.roll(u, -1, axis=0) - u
        drop = gx ** 2 + gy ** 2 < kappa / beta
        gx[drop] = 0.0
        gy[drop] = 0.0
        div = (np.roll(gx, 1, axis=1) - gx) + (np.roll(gy, 1, axis=0) - gy)
        u = np.real(np.fft.ifft2((F_img + beta * np.fft.fft2(div)) /
                                 (1.0 + beta * denom_grad)))
        beta *= beta_rate
    return u


def single_plane_operator(W: BlurOperator, i: int) -> "BlurOperator":
    """A whole-image blur operator using only plane i's warp sum."""
    Wi = W.plane_matrices[i]
    return BlurOperator(Wi, Wi.T.tocsr(), [Wi], W.shape)


def plane_guides(g: np.ndarray, W: BlurOperator, lam_f: float = LAMBDA_F,
                 l0_weight: float = 0.005):
    """Per-plane whole-image deconvolutions and their L0-smoothed guides.

    Each plane's blur hypothesis is inverted over the full frame; the guides
    feed the segmentation data cost. Mask-independent, so computed once.
    """
    latents, guides = [], []
    for i in range(len(W.plane_matrices)):
        f_i = estimate_latent(g, single_plane_operator(W, i), lam_f=lam_f)
        latents.append(f_i)
        guides.append(l0_smooth(f_i, l0_weight))
    return latents, guides


def plane_data_costs(g: np.ndarray, f_guide, W: BlurOperator,
                     latents=None, window: int = DC_WINDOW,
                     artifact_weight: float = 3.0,
                     overshoot_weight: float = 10.0,
                     texture_weighted: bool = True) -> np.ndarray:
    """Per-pixel, per-plane model-fit costs normalized to [0, 1].

    The core term is the windowed squared residual between g and plane i's
    reblur of the guide. With per-plane guides (f_guide a list) two
    identifiability terms are added: the energy the L0 filter removed from
    that plane's deconvolution (ringing from a wrong blur hypothesis) and the
    deconvolution's out-of-range overshoot. Costs are divided by the
    per-pixel maximum, and low-texture windows are faded toward a neutral
    cost so the smoothness term decides them.
    """
    from scipy.ndimage import uniform_filter

    g = np.asarray(g, dtype=float)
    n = len(W.plane_matrices)
    per_plane = isinstance(f_guide, (list, tuple))
    costs = []
    for i in range(n):
        guide = f_guide[i] if per_plane else f_guide
        c = uniform_filter((g - W.apply_plane(i, guide)) ** 2, size=window,
                           mode="nearest")
        if latents is not None:
            f_i = latents[i]
            c = c + artifact_weight * uniform_filter(
                (f_i - guide) ** 2, size=window, mode="nearest")
            c = c + overshoot_weight * uniform_filter(
                (np.clip(f_i, 0.0, 1.0) - f_i) ** 2, size=window,
                mode="nearest")
        costs.append(c)
    dc = np.stack(costs, axis=-1)
    dc = dc / (dc.max(axis=-1, keepdims=True) + 0.05 * dc.mean() + 1e-12)
    if texture_weighted:
        gx, gy = np.gradient(g)
        tex = uniform_filter(gx ** 2 + gy ** 2, size=window, mode="nearest")
        scale = np.quantile(tex, 0.6)
        conf = np.minimum(tex / max(scale, 1e-12), 1.0)[..., None]
        dc = conf * dc + (1.0 - conf) * 0.5
    # separable averaging of near-zero residuals can round slightly negative
    return np.clip(dc, 0.0, 1.0)


def segment_planes(g: np.ndarray, f_guide, W: BlurOperator,
                   latents=None, lam_l: float = LAMBDA_L,
                   r: float = SMOOTHNESS_BASE, window: int = DC_WINDOW,
                   init_labels: np.ndarray | None = None) -> SegmentationMasks:
    """Assign each pixel to the plane whose blur model explains it best,
    regularized by a label-difference smoothness metric on the 4-grid.

    f_guide is either one shared guidance image or a list with one guide per
    plane (see plane_data_costs).
    """
    n = len(W.plane_matrices)
    if n == 1:
        return SegmentationMasks.full(W.shape)
    dc = plane_data_costs(g, f_guide, W, latents=latents, window=window)
    labels = alpha_expansion(dc, lambda a, b: smoothness_cost(a, b, r), lam_l,
                             init_labels=init_labels)
    return SegmentationMasks.from_labels(labels, n=n)


@dataclass
class RestorationState:
    """Alternating-minimization output and per-iteration diagnostics."""

    latent: np.ndarray
    masks: SegmentationMasks
    iteration: int
    energy_trace: list[float] = field(default_factory=list)
    mask_history: list[SegmentationMasks] = field(default_factory=list)
    depth_map: np.ndarray | None = None


def _restoration_objective(g, W, f, lam_f):
    Dx, Dy = _gradient_matrices(g.shape)
    fv = f.ravel()
    fidelity = float(np.sum((W.apply(f) - g) ** 2))
    tv = float(np.sum(np.hypot(Dx @ fv, Dy @ fv)))
    return fidelity + lam_f * tv


def alternate_restore(g: np.ndarray, tsf: TSF, planes: list[PlaneParams],
                      K: Intrinsics, background_index: int = 0,
                      iterations: int = AM_ITERATIONS,
                      lam_f: float = LAMBDA_F, lam_l: float = LAMBDA_L,
                      l0_weight: float = 0.005, window: int = DC_WINDOW,
                      masks: SegmentationMasks | None = None) -> RestorationState:
    """Alternate latent estimation and plane segmentation.

    Masks start with the background plane owning every pixel (unless an
    initial segmentation is supplied); each pass re-estimates the latent
    image under the current masks, L0-smooths it into a guidance image, and
    re-segments. The composited per-plane depth map accompanies the result.
    """
    g = np.asarray(g, dtype=float)
    shape = g.shape[:2]
    g_lum = g if g.ndim == 2 else g.mean(axis=2)
    if masks is None:
        labels = np.full(shape, background_index, dtype=np.int64)
        masks = SegmentationMasks.from_labels(labels, n=len(planes))
        fixed_masks = False
    else:
        fixed_masks = True
    latent = g
    state = RestorationState(g, masks, 0)
    latents = guides = None
    for it in range(iterations):
        W = build_blur_operator(tsf, planes, masks, K, shape)
        latent = estimate_latent(g, W, lam_f=lam_f)
        state.energy_trace.append(_restoration_objective(
            g_lum, W, latent if latent.ndim == 2 else latent.mean(axis=2),
            lam_f))
        if len(planes) > 1 and not fixed_masks:
            if guides is None:
                # first pass: bootstrap labels from per-plane deconvolutions
                latents, guides = plane_guides(g_lum, W, lam_f=lam_f,
                                               l0_weight=l0_weight)
                masks = segment_planes(g_lum, guides, W, latents=latents,
                                       lam_l=lam_l, window=window)
            else:
                # later passes: refine with the masked-operator latent, which
                # erodes mislabeled islands from their boundaries
                guide = l0_smooth(latent if latent.ndim == 2
                                  else latent.mean(axis=2), l0_weight)
                masks = segment_planes(g_lum, guide, W, lam_l=lam_l,
                                       window=window,
                                       init_labels=masks.labels())
        state.mask_history.append(masks)
        state.iteration = it + 1
    state.latent = latent
    state.masks = masks
    depth = np.zeros(shape)
    for plane, mask in zip(planes, masks.masks):
        depth[mask] = plane_depth_map(plane, K, shape)[mask]
    state.depth_map = depth
    return state
