"""Forward blur model: blurred images and ground-truth PSFs from a latent
image, scene description, and a transformation spread function (TSF)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraPose, Intrinsics, PlaneParams, PoseGrid,
                       homography_exact, warp_image)


class KernelRadiusError(ValueError):
    """A pose displaces the point outside the kernel support."""

    def __init__(self, required: int, radius: int):
        self.required = required
        self.radius = radius
        super().__init__(f"displacement needs kernel radius >= {required}, got {radius}")


@dataclass(frozen=True)
class TSF:
    """Sparse nonnegative weight distribution over a pose grid, summing to 1."""

    grid: PoseGrid
    indices: np.ndarray  # flat pose indices of nonzero cells
    weights: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if idx.shape != w.shape or idx.ndim != 1:
            raise ValueError("indices and weights must be 1-D arrays of equal length")
        if len(idx) == 0:
            raise ValueError("TSF must have at least one nonzero cell")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate pose indices")
        if np.any(idx < 0) or np.any(idx >= len(self.grid)):
            raise ValueError("pose index out of grid bounds")
        if np.any(w < 0):
            raise ValueError("TSF weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"TSF weights must sum to 1, got {w.sum()}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def delta(cls, grid: PoseGrid, index: int | None = None) -> "TSF":
        if index is None:
            index = grid.identity_index()
        return cls(grid, np.array([index]), np.array([1.0]))

    @classmethod
    def from_dense(cls, grid: PoseGrid, dense: np.ndarray, prune: float = 0.0) -> "TSF":
        dense = np.asarray(dense, dtype=float)
        if dense.shape != (len(grid),):
            raise ValueError("dense weight vector does not match the grid")
        idx = np.flatnonzero(dense > prune)
        w = dense[idx]
        return cls(grid, idx, w / w.sum())

    def dense(self) -> np.ndarray:
        out = np.zeros(len(self.grid))
        out[self.indices] = self.weights
        return out

    def poses(self) -> list[CameraPose]:
        return [self.grid.pose(int(i)) for i in self.indices]


@dataclass(frozen=True)
class SegmentationMasks:
    """N pairwise-disjoint binary masks whose union covers every pixel."""

    masks: np.ndarray  # (N, H, W) bool

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=bool)
        if m.ndim != 3 or m.shape[0] < 1:
            raise ValueError("masks must be a (N, H, W) array with N >= 1")
        counts = m.sum(axis=0)
        if np.any(counts != 1):
            raise ValueError("masks must be pairwise disjoint and cover every pixel")
        object.__setattr__(self, "masks", m)

    @classmethod
    def from_labels(cls, labels: np.ndarray, n: int | None = None) -> "SegmentationMasks":
        labels = np.asarray(labels)
        if n is None:
            n = int(labels.max()) + 1
        return cls(np.stack([labels == i for i in range(n)]))

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "SegmentationMasks":
        return cls(np.ones((1,) + tuple(shape), dtype=bool))

    @property
    def n_planes(self) -> int:
        return self.masks.shape[0]

    def labels(self) -> np.ndarray:
        return np.argmax(self.masks, axis=0)


@dataclass(frozen=True)
class SceneModel:
    """Piecewise-planar scene: one plane per mask, shared intrinsics."""

    planes: list[PlaneParams]
    masks: SegmentationMasks
    intrinsics: Intrinsics

    def __post_init__(self):
        if len(self.planes) != self.masks.n_planes:
            raise ValueError(f"{len(self.planes)} planes but {self.masks.n_planes} masks")
        scales = [p.scale for p in self.planes]
        if not any(abs(s - 1.0) < 1e-9 for s in scales):
            raise ValueError("one plane must be at the reference depth (scale = 1)")

    @property
    def reference_index(self) -> int:
        return min(range(len(self.planes)), key=lambda i: abs(self.planes[i].scale - 1.0))

    def plane_at(self, x: float, y: float, shape: tuple[int, int]) -> int:
        """Index of the plane owning the pixel nearest to centered coords (x, y)."""
        cx, cy = self.intrinsics.center(shape)
        r = int(round(np.clip(y + cy, 0, shape[0] - 1)))
        c = int(round(np.clip(x + cx, 0, shape[1] - 1)))
        return int(self.masks.labels()[r, c])


@dataclass(frozen=True)
class PSF:
    """Local blur kernel on an odd-sided grid, anchored at the center cell."""

    kernel: np.ndarray
    location: tuple[float, float] = (0.0, 0.0)  # centered pixel coords
    low_confidence: bool = False

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
            raise ValueError("kernel must be a square grid of odd side")
        if np.any(k < 0):
            raise ValueError("kernel entries must be nonnegative")
        if abs(k.sum() - 1.0) > 1e-6:
            raise ValueError(f"kernel must sum to 1, got {k.sum()}")
        object.__setattr__(self, "kernel", k)

    @property
    def radius(self) -> int:
        return self.kernel.shape[0] // 2

    @classmethod
    def delta(cls, radius: int, location=(0.0, 0.0)) -> "PSF":
        k = np.zeros((2 * radius + 1, 2 * radius + 1))
        k[radius, radius] = 1.0
        return cls(k, location)


def blur_single_plane(f: np.ndarray, tsf: TSF, plane: PlaneParams,
                      K: Intrinsics) -> np.ndarray:
    """Weighted sum of inverse-warped latent images; linear in f, no clipping."""
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    for idx, w in zip(tsf.indices, tsf.weights):
        H = homography_exact(tsf.grid.pose(int(idx)), plane, K)
        warped, _ = warp_image(f, H, K)
        out += w * warped
    return out


def blur_multi_plane(f: np.ndarray, tsf: TSF, scene: SceneModel) -> np.ndarray:
    """Per-plane blur composited with the segmentation masks."""
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    for plane, mask in zip(scene.planes, scene.masks.masks):
        g_i = blur_single_plane(f, tsf, plane, scene.intrinsics)
        m = mask if f.ndim == 2 else mask[..., None]
        out += m * g_i
    return out


def pose_displacements(poses: np.ndarray, location, plane: PlaneParams,
                       K: Intrinsics) -> np.ndarray:
    """Displacements H_p(x) - x for an array of poses, shape (|poses|, 2)."""
    x, y = float(location[0]), float(location[1])
    nx, ny, nz = plane.normal
    nu = K.focal_length
    tx = poses[:, 0] * plane.scale
    ty = poses[:, 1] * plane.scale
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    xp = (c + nx * tx) * x + (s + ny * tx) * y + nu * nz * tx
    yp = (-s + nx * ty) * x + (c + ny * ty) * y + nu * nz * ty
    return np.stack([xp - x, yp - y], axis=1)


def splat_displacements(disp: np.ndarray, weights: np.ndarray, radius: int) -> np.ndarray:
    """Accumulate weights at sub-pixel displacements into a kernel grid.

    Bilinear 4-cell splat; raises KernelRadiusError when a displacement does
    not fit inside the kernel with its full splat footprint.
    """
    size = 2 * radius + 1
    kernel = np.zeros((size, size))
    max_disp = np.max(np.abs(disp)) if len(disp) else 0.0
    if max_disp > radius - 1 + 1e-12:
        raise KernelRadiusError(int(np.ceil(max_disp)) + 1, radius)
    u = disp[:, 0] + radius
    v = disp[:, 1] + radius
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = u - u0
    fv = v - v0
    np.add.at(kernel, (v0, u0), weights * (1 - fv) * (1 - fu))
    np.add.at(kernel, (v0, u0 + 1), weights * (1 - fv) * fu)
    np.add.at(kernel, (v0 + 1, u0), weights * fv * (1 - fu))
    np.add.at(kernel, (v0 + 1, u0 + 1), weights * fv * fu)
    return kernel


def psf_from_tsf(tsf: TSF, location, plane: PlaneParams, K: Intrinsics,
                 radius: int = 30) -> PSF:
    """Ground-truth PSF at a location: TSF mass splatted at pose displacements."""
    poses = np.stack([p.as_array() for p in tsf.poses()])
    disp = pose_displacements(poses, location, plane, K)
    kernel = splat_displacements(disp, tsf.weights, radius)
    return PSF(kernel, (float(location[0]), float(location[1])))


def trajectory_to_tsf(times: np.ndarray, poses: np.ndarray, grid: PoseGrid) -> TSF:
    """Bin a timestamped pose sequence into TSF weights (dwell-time fractions)."""
    times = np.asarray(times, dtype=float)
    poses = np.asarray(poses, dtype=float)
    if len(times) == 0:
        raise ValueError("empty trajectory")
    if poses.shape != (len(times), 3):
        raise ValueError("poses must be (len(times), 3)")
    if len(times) == 1:
        dwell = np.array([1.0])
    else:
        mids = (times[1:] + times[:-1]) / 2.0
        edges = np.concatenate([[times[0]], mids, [times[-1]]])
        dwell = np.diff(edges)
    dense = np.zeros(len(grid))
    for (tx, ty, th), dt in zip(poses, dwell):
        dense[grid.nearest_index(tx, ty, th)] += dt
    return TSF.from_dense(grid, dense)
