"""Per-patch PSF extraction and reduction to endpoint shifts.

Each blurred-image patch yields one KernelSample: a local PSF plus the
vector between the two extreme points of its support. Those shift vectors
are the observable that drives plane-normal recovery.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .geometry import Intrinsics
from .synthesis import PSF

BINARIZE_FRACTION = 0.1  # support threshold as a fraction of the kernel max
TEXTURE_GATE_FRACTION = 0.01  # reject patches below this share of mean gradient energy


@dataclass(frozen=True)
class KernelSample:
    """Local PSF with its image location and extracted endpoint shift."""

    location: tuple[float, float]  # principal-point-centered pixel coords
    psf: PSF
    e1: tuple[float, float]  # endpoint with larger x (kernel frame)
    e2: tuple[float, float]
    degenerate: bool = False
    low_confidence: bool = False

    @property
    def shift(self) -> np.ndarray:
        return np.array([self.e1[0] - self.e2[0], self.e1[1] - self.e2[1]])

    def flipped(self) -> "KernelSample":
        return KernelSample(self.location, self.psf, self.e2, self.e1,
                            self.degenerate, self.low_confidence)


@dataclass(frozen=True)
class PatchGrid:
    """Overlapping patch tiling; every pixel is covered by at least one patch."""

    image_shape: tuple[int, int]
    patch_size: int = 120
    overlap: int = 50

    def __post_init__(self):
        h, w = self.image_shape
        if self.patch_size > h or self.patch_size > w:
            raise ValueError(f"patch size {self.patch_size} exceeds image {h}x{w}")
        if not 0 <= self.overlap < self.patch_size:
            raise ValueError("overlap must be in [0, patch_size)")

    def _starts(self, extent: int) -> list[int]:
        stride = self.patch_size - self.overlap
        starts = list(range(0, extent - self.patch_size + 1, stride))
        if starts[-1] != extent - self.patch_size:
            starts.append(extent - self.patch_size)
        return starts

    def patches(self) -> list[tuple[int, int]]:
        """Top-left (row, col) corners in a fixed row-major order."""
        h, w = self.image_shape
        return [(r, c) for r in self._starts(h) for c in self._starts(w)]

    def centers(self, K: Intrinsics) -> list[tuple[float, float]]:
        """Patch centers in principal-point-centered coordinates."""
        cx, cy = K.center(self.image_shape)
        half = (self.patch_size - 1) / 2.0
        return [(c + half - cx, r + half - cy) for r, c in self.patches()]


def _refine_endpoint(kernel: np.ndarray, cell: tuple[int, int],
                     other: tuple[int, int] | None = None) -> tuple[float, float]:
    """Intensity-weighted centroid of the 3x3 neighborhood, in kernel frame.

    Cells lying strictly inward (toward the other endpoint) are excluded so
    the plateau of a streak does not drag the endpoint toward its middle; a
    clean n-cell segment keeps its exact cell-center endpoints.
    """
    r = kernel.shape[0] // 2
    i, j = cell
    i0, i1 = max(i - 1, 0), min(i + 2, kernel.shape[0])
    j0, j1 = max(j - 1, 0), min(j + 2, kernel.shape[1])
    win = kernel[i0:i1, j0:j1].copy()
    ii, jj = np.mgrid[i0:i1, j0:j1]
    inward = None
    if other is not None and other != cell:
        inward = np.array([other[0] - i, other[1] - j], dtype=float)
        inward /= np.linalg.norm(inward)
        proj = (ii - i) * inward[0] + (jj - j) * inward[1]
        win[np.abs(proj) > 0.5] = 0.0  # keep only the perpendicular slice
    total = win.sum()
    if total <= 0:
        return (float(j - r), float(i - r))
    x = float((jj * win).sum() / total - r)
    y = float((ii * win).sum() / total - r)
    if inward is not None:
        # axial sub-pixel correction: for a uniform streak splatted with a
        # bilinear (hat) footprint, the end-cell mass relative to the plateau
        # is the integral of the hat up to the streak end; invert that to get
        # the end position within the cell
        ratio = float(np.clip(kernel[i, j] / kernel.max(), 0.0, 1.0))
        if ratio <= 0.5:
            d = np.sqrt(2.0 * ratio) - 1.0
        else:
            d = 1.0 - np.sqrt(2.0 * (1.0 - ratio))
        oi = i - int(round(inward[0]))
        oj = j - int(round(inward[1]))
        outward_mass = 0.0
        if 0 <= oi < kernel.shape[0] and 0 <= oj < kernel.shape[1]:
            outward_mass = kernel[oi, oj]
        if d > 0 and outward_mass <= 1e-12:
            d = 0.0  # discrete segment: no evidence past the cell center
        d = float(np.clip(d, -0.8, 0.5))
        x += d * (-inward[1])
        y += d * (-inward[0])
    return (x, y)


def _blob_component(kernel: np.ndarray, labels: np.ndarray,
                    cell: tuple[int, int]) -> tuple[float, float] | None:
    """Exact centroid when the cell sits in an isolated splat blob.

    A single pose splatted with a bilinear footprint occupies at most a 2x2
    block; its mass centroid recovers the continuous position exactly, so no
    streak-oriented masking or end correction should be applied. Returns None
    when the cell's connected component is larger than one splat.
    """
    comp = labels == labels[cell]
    ii, jj = np.nonzero(comp)
    if np.ptp(ii) > 1 or np.ptp(jj) > 1:
        return None
    w = kernel[ii, jj]
    total = w.sum()
    r = kernel.shape[0] // 2
    return (float((jj * w).sum() / total - r), float((ii * w).sum() / total - r))


def _max_separation_pair(coords: np.ndarray) -> tuple[int, int]:
    """Indices of the pair of points with maximum Euclidean separation."""
    if len(coords) > 60:
        try:
            from scipy.spatial import ConvexHull
            hull = ConvexHull(coords)
            cand = hull.vertices
        except Exception:  # collinear / degenerate support
            cand = np.arange(len(coords))
    else:
        cand = np.arange(len(coords))
    pts = coords[cand].astype(float)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    a, b = np.unravel_index(int(np.argmax(d2)), d2.shape)
    return int(cand[a]), int(cand[b])


def psf_endpoints(psf: PSF, binarize_fraction: float = BINARIZE_FRACTION):
    """Extreme points of the PSF support, refined to sub-pixel accuracy.

    Returns (e1, e2, degenerate) in kernel-frame coordinates; e1 is the
    endpoint with larger x (ties broken toward larger y). A support of
    fewer than 2 cells is degenerate and reports a zero shift.
    """
    kernel = psf.kernel
    r = psf.radius
    support = np.argwhere(kernel >= binarize_fraction * kernel.max())
    if len(support) < 2:
        if len(support) == 1:
            e = _refine_endpoint(kernel, tuple(support[0]))
        else:
            e = (0.0, 0.0)
        return e, e, True
    ia, ib = _max_separation_pair(support.astype(float))
    ca, cb = tuple(support[ia]), tuple(support[ib])
    labels, _ = ndimage.label(kernel > 1e-3 * kernel.max())

    def _endpoint(cell, far):
        comp = _blob_component(kernel, labels, cell)
        if comp is not None:
            return comp
        return _refine_endpoint(kernel, cell, far)

    ea = _endpoint(ca, cb)
    eb = _endpoint(cb, ca)
    # e1 = larger x, ties (up to float noise in the centroid) broken by larger y
    if eb[0] - ea[0] > 1e-6 or (abs(ea[0] - eb[0]) <= 1e-6 and eb[1] > ea[1]):
        ea, eb = eb, ea
    return ea, eb, False


# ---------------------------------------------------------------------------
# blind per-patch kernel estimation
# ---------------------------------------------------------------------------

def _shock_filter(img: np.ndarray, iters: int = 3, dt: float = 0.5) -> np.ndarray:
    u = img.copy()
    for _ in range(iters):
        blurred = cv2.GaussianBlur(u, (0, 0), 1.0)
        lap = cv2.Laplacian(blurred, cv2.CV_64F)
        gx = cv2.Sobel(u, cv2.CV_64F, 1, 0, ksize=3, scale=0.125)
        gy = cv2.Sobel(u, cv2.CV_64F, 0, 1, ksize=3, scale=0.125)
        u = u - dt * np.sign(lap) * np.hypot(gx, gy)
    return u


def _grad(img: np.ndarray):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


def _taper_window(shape: tuple[int, int]) -> np.ndarray:
    wy = np.hanning(shape[0])
    wx = np.hanning(shape[1])
    return np.outer(wy, wx)


def _solve_kernel_fft(pred_gx: np.ndarray, pred_gy: np.ndarray,
                      blurred: np.ndarray, radius: int,
                      gamma: float = 1.0) -> np.ndarray:
    """Tikhonov-regularized kernel solve against predicted sharp gradients."""
    win = _taper_window(blurred.shape)
    bx, by = _grad(blurred)
    Lx, Ly = np.fft.fft2(pred_gx * win), np.fft.fft2(pred_gy * win)
    Bx, By = np.fft.fft2(bx * win), np.fft.fft2(by * win)
    num = np.conj(Lx) * Bx + np.conj(Ly) * By
    den = np.abs(Lx) ** 2 + np.abs(Ly) ** 2 + gamma
    k_full = np.fft.fftshift(np.real(np.fft.ifft2(num / den)))
    cy, cx = k_full.shape[0] // 2, k_full.shape[1] // 2
    k = k_full[cy - radius:cy + radius + 1, cx - radius:cx + radius + 1].copy()
    k[k < 0] = 0.0
    if k.max() > 0:
        k[k < 0.02 * k.max()] = 0.0
    s = k.sum()
    if s <= 0:
        k = np.zeros_like(k)
        k[radius, radius] = 1.0
        return k
    return k / s


def _kernel_cleanup(k: np.ndarray, frac: float) -> np.ndarray:
    """Threshold small entries and keep the connected component of the peak."""
    from scipy.ndimage import label as cc_label

    k = k.copy()
    k[k < frac * k.max()] = 0.0
    lab, n = cc_label(k > 0)
    if n > 1:
        main = lab[np.unravel_index(int(np.argmax(k)), k.shape)]
        k[lab != main] = 0.0
    s = k.sum()
    if s <= 0:
        k = np.zeros_like(k)
        k[k.shape[0] // 2, k.shape[1] // 2] = 1.0
        return k
    return k / s


def _center_kernel(k: np.ndarray) -> np.ndarray:
    """Roll the kernel so its mass centroid sits at the central cell."""
    r = k.shape[0] // 2
    ii, jj = np.mgrid[0:k.shape[0], 0:k.shape[1]]
    cy = int(round((ii * k).sum() / k.sum())) - r
    cx = int(round((jj * k).sum() / k.sum())) - r
    return np.roll(np.roll(k, -cy, axis=0), -cx, axis=1)


def _deconv_fft(blurred: np.ndarray, kernel: np.ndarray, gamma: float = 0.01) -> np.ndarray:
    """Tikhonov deconvolution with a gradient regularizer (periodic model)."""
    h, w = blurred.shape
    Kf = _psf_to_otf(kernel, (h, w))
    dx = np.zeros((h, w))
    dx[0, 0], dx[0, -1] = -1.0, 1.0
    dy = np.zeros((h, w))
    dy[0, 0], dy[-1, 0] = -1.0, 1.0
    Dx, Dy = np.fft.fft2(dx), np.fft.fft2(dy)
    G = np.fft.fft2(blurred)
    den = np.abs(Kf) ** 2 + gamma * (np.abs(Dx) ** 2 + np.abs(Dy) ** 2)
    return np.real(np.fft.ifft2(np.conj(Kf) * G / den))


def _psf_to_otf(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    padded = np.zeros(shape)
    kh, kw = kernel.shape
    padded[:kh, :kw] = kernel
    padded = np.roll(np.roll(padded, -(kh // 2), axis=0), -(kw // 2), axis=1)
    return np.fft.fft2(padded)


def gradient_energy(patch: np.ndarray) -> float:
    gx, gy = _grad(np.asarray(patch, dtype=float))
    return float(np.mean(gx ** 2 + gy ** 2))


def estimate_patch_kernel(patch: np.ndarray, max_radius: int = 20,
                          levels: int = 3, iters: int = 5,
                          texture_threshold: float = 0.0,
                          location=(0.0, 0.0)) -> PSF:
    """Coarse-to-fine blind estimation of a uniform kernel for one patch.

    Alternates sharp-edge prediction (shock filter + gradient thresholding)
    with a Tikhonov least-squares kernel solve in the gradient domain over a
    3-level pyramid. Textureless patches return a delta kernel flagged
    low-confidence instead of raising.
    """
    patch = np.asarray(patch, dtype=float)
    if patch.ndim == 3:
        patch = patch.mean(axis=2)
    if gradient_energy(patch) < texture_threshold:
        return PSF(PSF.delta(max_radius).kernel, location, low_confidence=True)

    pyramid = [patch]
    for _ in range(levels - 1):
        prev = pyramid[-1]
        pyramid.append(cv2.resize(prev, None, fx=1 / np.sqrt(2), fy=1 / np.sqrt(2),
                                  interpolation=cv2.INTER_AREA))
    pyramid = pyramid[::-1]

    kernel = None
    for g in pyramid:
        radius = max(2, int(round(max_radius * g.shape[0] / patch.shape[0])))
        if kernel is None:
            kernel = np.zeros((2 * radius + 1, 2 * radius + 1))
            kernel[radius, radius] = 1.0
        else:
            up = cv2.resize(kernel, (2 * radius + 1, 2 * radius + 1),
                            interpolation=cv2.INTER_LINEAR)
            up[up < 0] = 0
            kernel = up / up.sum()
        lo, hi = g.min(), g.max()
        latent = np.clip(_deconv_fft(g, kernel, gamma=0.01), lo, hi)
        for _ in range(iters):
            # edge prediction: denoise, sharpen, keep the strongest gradients
            pred = cv2.bilateralFilter(latent.astype(np.float32), 5, 0.1, 2.0)
            sharp = _shock_filter(pred.astype(float), iters=4, dt=0.6)
            gx, gy = _grad(sharp)
            mag = np.hypot(gx, gy)
            mask = mag >= np.quantile(mag, 0.92)
            kernel = _solve_kernel_fft(gx * mask, gy * mask, g, radius,
                                       gamma=1e-3 * mask.sum())
            kernel = _center_kernel(_kernel_cleanup(kernel, 0.03))
            latent = np.clip(_deconv_fft(g, kernel, gamma=0.01), lo, hi)
    kernel = _kernel_cleanup(kernel, 0.25)
    if kernel.shape[0] != 2 * max_radius + 1:
        full = np.zeros((2 * max_radius + 1, 2 * max_radius + 1))
        r0 = max_radius - kernel.shape[0] // 2
        full[r0:r0 + kernel.shape[0], r0:r0 + kernel.shape[1]] = kernel
        kernel = full
    return PSF(kernel, location)


# ---------------------------------------------------------------------------
# shift fields
# ---------------------------------------------------------------------------

def oracle_psf_source(tsf, scene, radius: int = 30):
    """PSF source that reads ground-truth kernels from the forward model."""
    from .synthesis import psf_from_tsf

    def source(patch, center):
        idx = scene.plane_at(center[0], center[1], scene.masks.masks.shape[1:])
        return psf_from_tsf(tsf, center, scene.planes[idx], scene.intrinsics, radius)

    return source


def blind_psf_source(max_radius: int = 20, texture_threshold: float = 0.0):
    """PSF source backed by the in-repo blind estimator."""

    def source(patch, center):
        return estimate_patch_kernel(patch, max_radius=max_radius,
                                     texture_threshold=texture_threshold,
                                     location=center)

    return source


def shift_field(blurred: np.ndarray, grid: PatchGrid, psf_source,
                K: Intrinsics, sign_vote: bool = True) -> list[KernelSample]:
    """One KernelSample per patch; degenerate samples are flagged, not dropped.

    A global sign-consistency vote flips samples whose shift disagrees with
    the majority direction, so the field uses one endpoint convention
    throughout (the underlying global sign remains ambiguous).
    """
    blurred = np.asarray(blurred, dtype=float)
    patches = grid.patches()
    if not patches:
        raise ValueError("empty patch grid")
    centers = grid.centers(K)
    mean_energy = gradient_energy(blurred)
    samples = []
    for (r, c), center in zip(patches, centers):
        patch = blurred[r:r + grid.patch_size, c:c + grid.patch_size]
        low_conf = gradient_energy(patch) < TEXTURE_GATE_FRACTION * mean_energy
        psf = psf_source(patch, center)
        e1, e2, degen = psf_endpoints(psf)
        samples.append(KernelSample(center, psf, e1, e2, degen,
                                    low_conf or psf.low_confidence))
    if sign_vote:
        shifts = np.array([s.shift for s in samples])
        ref = shifts.sum(axis=0)
        if np.linalg.norm(ref) > 0:
            samples = [s.flipped() if float(s.shift @ ref) < 0 else s for s in samples]
    return samples
