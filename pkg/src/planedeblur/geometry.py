"""Plane-induced homographies, their small-angle linearization, and warping.

Conventions used throughout the package:

* Pixel coordinates (x, y) are measured relative to the principal point,
  with x running along columns and y along rows (y grows downward).
* Camera translations are stored pre-divided by the reference depth d0;
  only the ratio t/d is observable, never an absolute distance.
* Plane depth is carried as the scale s = d0 / d relative to the
  reference depth, so s = 1 means "at reference depth".
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

MAX_THETA_Z = 0.1  # rad; beyond this the small-angle model is not trusted


class DegeneratePointError(ValueError):
    """Projective point mapped to the plane at infinity (w = 0)."""


class PlaneBehindCameraError(ValueError):
    """Plane passes through or behind the camera for some pixel."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with square pixels and zero skew."""

    focal_length: float
    principal_point: tuple[float, float] | None = None  # (cx, cy) in array pixels

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError(f"focal_length must be positive, got {self.focal_length}")

    def matrix(self) -> np.ndarray:
        nu = self.focal_length
        return np.diag([nu, nu, 1.0])

    def center(self, shape: tuple[int, int]) -> tuple[float, float]:
        """Principal point (cx, cy) in array pixels for an image of `shape` (H, W)."""
        if self.principal_point is not None:
            return self.principal_point
        h, w = shape[0], shape[1]
        return ((w - 1) / 2.0, (h - 1) / 2.0)


@dataclass(frozen=True)
class CameraPose:
    """In-plane camera pose: translations are dimensionless ratios t / d0."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0  # rad, rotation about the optical axis

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.theta])


def _axis_from_range(lo: float, hi: float, count: int, name: str) -> np.ndarray:
    if count < 1:
        raise ValueError(f"{name}: count must be >= 1")
    if count == 1:
        if abs(lo) > 1e-12 or abs(hi) > 1e-12:
            raise ValueError(f"{name}: single-cell axis must be the zero cell")
        return np.zeros(1)
    axis = np.linspace(lo, hi, count)
    if not np.any(np.abs(axis) < 1e-9):
        raise ValueError(f"{name}: axis must contain the identity value 0")
    return axis


@dataclass(frozen=True)
class PoseGrid:
    """Discrete search lattice over (tx/d0, ty/d0, thetaZ).

    Enumeration order is fixed: tx varies slowest, then ty, then theta;
    the flat index of cell (i, j, k) is (i * n_ty + j) * n_theta + k.
    """

    tx_axis: np.ndarray
    ty_axis: np.ndarray
    theta_axis: np.ndarray

    @classmethod
    def from_ranges(cls, tx: tuple[float, float, int], ty: tuple[float, float, int],
                    theta: tuple[float, float, int]) -> "PoseGrid":
        th = _axis_from_range(*theta, "theta")
        if np.max(np.abs(th)) > MAX_THETA_Z:
            raise ValueError(
                f"|theta| must be <= {MAX_THETA_Z} rad, grid reaches {np.max(np.abs(th)):.4f}")
        return cls(_axis_from_range(*tx, "tx"), _axis_from_range(*ty, "ty"), th)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.tx_axis), len(self.ty_axis), len(self.theta_axis))

    def __len__(self) -> int:
        return len(self.tx_axis) * len(self.ty_axis) * len(self.theta_axis)

    def poses(self) -> np.ndarray:
        """All poses as a (|P|, 3) array in enumeration order."""
        tx, ty, th = np.meshgrid(self.tx_axis, self.ty_axis, self.theta_axis, indexing="ij")
        return np.stack([tx.ravel(), ty.ravel(), th.ravel()], axis=1)

    def pose(self, index: int) -> CameraPose:
        i, rem = divmod(index, len(self.ty_axis) * len(self.theta_axis))
        j, k = divmod(rem, len(self.theta_axis))
        return CameraPose(self.tx_axis[i], self.ty_axis[j], self.theta_axis[k])

    def identity_index(self) -> int:
        i = int(np.argmin(np.abs(self.tx_axis)))
        j = int(np.argmin(np.abs(self.ty_axis)))
        k = int(np.argmin(np.abs(self.theta_axis)))
        return (i * len(self.ty_axis) + j) * len(self.theta_axis) + k

    def nearest_index(self, tx: float, ty: float, theta: float) -> int:
        """Flat index of the nearest cell; raises if the pose is outside the grid."""
        idx = []
        for val, axis, name in ((tx, self.tx_axis, "tx"), (ty, self.ty_axis, "ty"),
                                (theta, self.theta_axis, "theta")):
            step = axis[1] - axis[0] if len(axis) > 1 else max(abs(axis[0]), 1e-6) + 1.0
            if val < axis[0] - step / 2 or val > axis[-1] + step / 2:
                raise ValueError(f"pose {name}={val} outside grid range "
                                 f"[{axis[0]}, {axis[-1]}]")
            idx.append(int(np.argmin(np.abs(axis - val))))
        i, j, k = idx
        return (i * len(self.ty_axis) + j) * len(self.theta_axis) + k


@dataclass(frozen=True)
class PlaneParams:
    """Scene plane: unit normal with nZ > 0 and scale s = d0 / d."""

    normal: tuple[float, float, float]
    scale: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"normal must be unit length, got |n| = {np.linalg.norm(n)}")
        if not n[2] > 0:
            raise ValueError("normal must have nZ > 0 (plane facing the camera)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "normal", (float(n[0]), float(n[1]), float(n[2])))

    @classmethod
    def from_direction(cls, direction, scale: float = 1.0) -> "PlaneParams":
        """Build from a not-necessarily-unit normal direction."""
        n = np.asarray(direction, dtype=float)
        n = n / np.linalg.norm(n)
        if n[2] < 0:
            n = -n
        return cls(tuple(n), scale)

    @property
    def distance(self) -> float:
        """Plane distance d in units of the reference depth d0."""
        return 1.0 / self.scale

    def flipped(self) -> "PlaneParams":
        """Same plane with (nX, nY) negated; the shift-field sign twin."""
        nx, ny, nz = self.normal
        return PlaneParams.from_direction((-nx, -ny, nz), self.scale)


FRONTO_PARALLEL = PlaneParams((0.0, 0.0, 1.0))


def homography_exact(pose: CameraPose, plane: PlaneParams, K: Intrinsics) -> np.ndarray:
    """H = K (R + t n^T / d) K^{-1} with the full trigonometric rotation."""
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    R = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    # pose translations are t/d0, so t/d = (t/d0) * (d0/d) = t * scale
    t_over_d = np.array([pose.tx, pose.ty, 0.0]) * plane.scale
    n = np.asarray(plane.normal)
    Km = K.matrix()
    Kinv = np.diag([1.0 / K.focal_length, 1.0 / K.focal_length, 1.0])
    H = Km @ (R + np.outer(t_over_d, n)) @ Kinv
    H[2, :] = (0.0, 0.0, 1.0)  # exact by construction; clear rounding residue
    return H


def homography_linearized(pose: CameraPose, plane: PlaneParams, K: Intrinsics) -> np.ndarray:
    """Small-angle homography (cos -> 1, sin -> theta); exact when theta = 0."""
    if abs(pose.theta) > MAX_THETA_Z:
        raise ValueError(f"|theta| = {abs(pose.theta)} exceeds small-angle bound {MAX_THETA_Z}")
    nx, ny, nz = plane.normal
    nu = K.focal_length
    a = pose.tx * plane.scale
    b = pose.ty * plane.scale
    th = pose.theta
    return np.array([
        [1.0 + nx * a, th + ny * a, nu * nz * a],
        [-th + nx * b, 1.0 + ny * b, nu * nz * b],
        [0.0, 0.0, 1.0],
    ])


def apply_homography(H: np.ndarray, points) -> np.ndarray:
    """Map principal-point-centered pixel coordinates through H.

    `points` is (..., 2); returns the same shape. Raises DegeneratePointError
    if any point lands on w = 0.
    """
    pts = np.asarray(points, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegeneratePointError("point maps to infinity under H")
    xp = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w
    yp = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w
    return np.stack([xp, yp], axis=-1)


def _bilinear_gather(image: np.ndarray, sx: np.ndarray, sy: np.ndarray):
    """Sample image at array coordinates (sx, sy) with replicate boundary.

    Returns (values, valid) where valid marks samples inside the image domain.
    """
    h, w = image.shape[:2]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v = ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
         + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1]))
    return v, valid


def warp_image(image: np.ndarray, H: np.ndarray, K: Intrinsics):
    """Warp so that output(x) = image(H^{-1}(x)), bilinear, replicate boundary.

    Returns (warped, valid) where valid is False wherever the source sample
    fell outside the image and edge replication was used instead.
    """
    image = np.asarray(image, dtype=float)
    if image.size == 0:
        raise ValueError("empty image")
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError as e:
        raise ValueError("homography is not invertible") from e
    h, w = image.shape[:2]
    cx, cy = K.center((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs - cx, ys - cy], axis=-1)
    src = apply_homography(Hinv, pts)
    sx = src[..., 0] + cx
    sy = src[..., 1] + cy
    return _bilinear_gather(image, sx, sy)


def warp_matrix(H: np.ndarray, shape: tuple[int, int], K: Intrinsics):
    """Sparse matrix form of warp_image for a single-channel image.

    Row ordering is row-major over output pixels; columns index source pixels.
    The same clipped bilinear weights as warp_image are used, so applying the
    matrix reproduces warp_image output to floating-point rounding.
    """
    from scipy import sparse

    Hinv = np.linalg.inv(H)
    h, w = shape
    cx, cy = K.center((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([(xs - cx).ravel(), (ys - cy).ravel()], axis=-1)
    src = apply_homography(Hinv, pts)
    sx = src[:, 0] + cx
    sy = src[:, 1] + cy
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    n = h * w
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    vals = np.concatenate([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def plane_depth_map(plane: PlaneParams, K: Intrinsics, shape: tuple[int, int]) -> np.ndarray:
    """Per-pixel depth Z(x, y) = d * nu / (nX*x + nY*y + nZ*nu), in units of d0."""
    h, w = shape
    nx, ny, nz = plane.normal
    nu = K.focal_length
    cx, cy = K.center((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    denom = nx * (xs - cx) + ny * (ys - cy) + nz * nu
    if np.any(denom <= 0):
        r, c = np.unravel_index(int(np.argmin(denom)), denom.shape)
        raise PlaneBehindCameraError(
            f"plane passes through or behind the camera at pixel (row={r}, col={c})")
    return plane.distance * nu / denom
