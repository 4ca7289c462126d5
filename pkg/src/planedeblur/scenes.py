"""Bundled synthetic scene suite: procedural textures, handshake-like camera
trajectories, and rendering of scene configs into blurred/latent image pairs.

The paper's synthetic protocol uses captured camera trajectories and a private
10-image dataset; neither is published. This module replaces them with ten
deterministic scenes of matching structure (single / two / three planes,
fronto-parallel and inclined normals) plus one large textured scene for the
blind kernel estimator. Every scene is fully described by a YAML config
(see fileio.parse_scene_config), so external scenes and recorded trajectories
can be dropped in without code changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import cv2
import numpy as np

from . import fileio
from .geometry import Intrinsics, PlaneParams, PoseGrid
from .synthesis import (TSF, SceneModel, SegmentationMasks, blur_multi_plane,
                        trajectory_to_tsf)


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def cartoon_texture(shape: tuple[int, int], seed: int = 0, patches: int = 40,
                    clear_columns=()) -> np.ndarray:
    """Piecewise-constant image of random rectangles and disks on gray.

    clear_columns lists [start, stop) column bands kept flat; placing one at
    each plane boundary makes small segmentation errors metrically harmless.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    img = np.full(shape, 0.5)
    yy, xx = np.mgrid[0:h, 0:w]
    placed = tries = 0
    while placed < patches and tries < 40 * max(patches, 1):
        tries += 1
        r = int(rng.integers(4, h - 4))
        c = int(rng.integers(4, w - 4))
        s = int(rng.integers(6, 22))
        c0, c1 = max(0, c - s // 2), min(w, c + s // 2 + 1)
        if any(c0 < b and c1 > a for a, b in clear_columns):
            continue
        v = float(rng.uniform(0.05, 0.95))
        if rng.random() < 0.5:
            img[max(0, r - s // 2):r + s // 2 + 1, c0:c1] = v
        else:
            disk = (yy - r) ** 2 + (xx - c) ** 2 < (s // 2) ** 2
            disk &= (xx >= c0) & (xx < c1)
            img[disk] = v
        placed += 1
    return cv2.GaussianBlur(img, (0, 0), 0.5)


def truth_labels(shape: tuple[int, int], boundaries: list[int]) -> np.ndarray:
    """Vertical-strip ground-truth label map from boundary columns."""
    labels = np.zeros(shape, dtype=int)
    for i, b in enumerate(boundaries):
        labels[:, b:] = i + 1
    return labels


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def walk_trajectory(seed: int = 0, steps: int = 60, sigma: float = 0.0008,
                    momentum: float = 0.7, limit: float = 0.005,
                    theta_sigma: float = 0.0):
    """Smooth handshake-like random walk in (tx/d0, ty/d0, thetaZ).

    Velocity is an AR(1) process; positions reflect at +/- limit and the
    translation mean is removed so the blur stays roughly centered.
    """
    rng = np.random.default_rng(seed)
    scale = np.array([sigma, sigma, theta_sigma])
    vel = np.zeros(3)
    pos = np.zeros(3)
    path = [pos.copy()]
    for _ in range(steps - 1):
        vel = momentum * vel + rng.normal(0.0, 1.0, size=3) * scale
        pos = pos + vel
        for a, lim in ((0, limit), (1, limit), (2, 0.02)):
            if abs(pos[a]) > lim:
                pos[a] = np.sign(pos[a]) * (2 * lim - abs(pos[a]))
                vel[a] = -vel[a]
        path.append(pos.copy())
    poses = np.array(path)
    poses[:, :2] -= poses[:, :2].mean(axis=0)
    poses[:, :2] = np.clip(poses[:, :2], -limit, limit)
    return np.linspace(0.0, 1.0, steps), poses


def sweep_trajectory(start, stop, steps: int = 60, curve=(0.0, 0.0, 0.0),
                     ease: float = 0.0):
    """Gently curved pose sweep from start to stop with a nonuniform speed.

    curve is a mid-sweep offset added with a 4u(1-u) bump; ease warps the
    progress variable (u = t + ease*sin(2*pi*t)) so dwell time, and hence TSF
    weight, varies along the path.
    """
    if not 0.0 <= ease < 0.159:  # keep u monotone: 1 + 2*pi*ease*cos > 0
        raise ValueError("ease must be in [0, 0.159)")
    start = np.asarray(start, dtype=float)
    stop = np.asarray(stop, dtype=float)
    curve = np.asarray(curve, dtype=float)
    t = np.linspace(0.0, 1.0, steps)
    u = t + ease * np.sin(2.0 * np.pi * t)
    poses = ((1.0 - u)[:, None] * start + u[:, None] * stop
             + (4.0 * u * (1.0 - u))[:, None] * curve)
    return t, poses


def trajectory_from_config(traj_cfg: dict, base_dir=None):
    """Materialize a trajectory spec (walk / sweep / file) into (times, poses)."""
    if "file" in traj_cfg:
        path = Path(traj_cfg["file"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return fileio.load_trajectory(path)
    if traj_cfg.get("kind", "walk") == "sweep":
        return sweep_trajectory(traj_cfg["start"], traj_cfg["stop"],
                                steps=traj_cfg["steps"],
                                curve=traj_cfg.get("curve", (0.0, 0.0, 0.0)),
                                ease=traj_cfg.get("ease", 0.0))
    return walk_trajectory(seed=traj_cfg["seed"], steps=traj_cfg["steps"],
                           sigma=traj_cfg["sigma"],
                           momentum=traj_cfg["momentum"],
                           limit=traj_cfg["limit"],
                           theta_sigma=traj_cfg["theta_sigma"])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneRender:
    """A synthesized scene: latent/blurred pair plus all ground truth."""

    config: dict
    latent: np.ndarray
    blurred: np.ndarray
    scene: SceneModel
    tsf: TSF
    pose_grid: PoseGrid
    times: np.ndarray
    poses: np.ndarray

    @property
    def truth_labels(self) -> np.ndarray:
        return self.scene.masks.labels()

    @property
    def intrinsics(self) -> Intrinsics:
        return self.scene.intrinsics


def scene_model_from_config(cfg: dict) -> SceneModel:
    planes = [PlaneParams.from_direction(p["normal"], scale=p["scale"])
              for p in cfg["planes"]]
    labels = truth_labels(cfg["size"], cfg["boundaries"])
    masks = SegmentationMasks.from_labels(labels, len(planes))
    return SceneModel(planes, masks, fileio.intrinsics_from_config(cfg))


def render_scene(cfg: dict, base_dir=None) -> SceneRender:
    """Deterministically synthesize the blurred image and its ground truth."""
    tex = cfg["texture"]
    latent = cartoon_texture(cfg["size"], seed=tex["seed"],
                             patches=tex["patches"],
                             clear_columns=tex["clear_columns"])
    scene = scene_model_from_config(cfg)
    grid = PoseGrid.from_ranges(cfg["grid"]["tx"], cfg["grid"]["ty"],
                                cfg["grid"]["theta"])
    times, poses = trajectory_from_config(cfg["trajectory"], base_dir)
    tsf = trajectory_to_tsf(times, poses, grid)
    blurred = blur_multi_plane(latent, tsf, scene)
    return SceneRender(cfg, latent, blurred, scene, tsf, grid, times, poses)


# ---------------------------------------------------------------------------
# bundled suite
# ---------------------------------------------------------------------------

# the ten deblurring scenes of the reproduction protocol, in reporting order
BUNDLED_SCENES = [
    "fronto-a", "fronto-b", "fronto-c", "fronto-d", "inclined-single",
    "two-plane-a", "two-plane-b", "two-plane-c", "two-plane-d", "three-plane",
]
# large textured single-plane scene for the blind kernel estimator
BLIND_KERNEL_SCENE = "textured-blind"


def bundled_scene_names() -> list[str]:
    return list(BUNDLED_SCENES)


def bundled_config(name: str) -> dict:
    """Load and validate one bundled scene config from package data."""
    ref = resources.files("planedeblur") / "data" / "scenes" / f"{name}.yaml"
    try:
        text = ref.read_text()
    except FileNotFoundError:
        known = ", ".join(BUNDLED_SCENES + [BLIND_KERNEL_SCENE])
        raise KeyError(f"unknown bundled scene '{name}' (have: {known})")
    return fileio.parse_scene_config(text)


def bundled_scene(name: str) -> SceneRender:
    return render_scene(bundled_config(name))
