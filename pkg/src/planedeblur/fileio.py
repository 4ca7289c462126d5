"""On-disk formats: scene configuration files, lossless rasters, and the
ground-truth sidecar that makes every synthesized image re-checkable.

Formats
-------
* Scene configs are YAML; validation errors carry the line number of the
  offending node.
* Images are PNG, 8-bit by default; depth maps are 16-bit PNG scaled by a
  recorded (min, max) range; label maps are palettized PNG.
* Trajectories are plain text with columns ``time tx ty theta`` (translations
  as t/d0 ratios, theta in radians); ``#`` starts a comment.
* The PSF field (oracle kernels at patch centers) is an ``.npz`` archive with
  keys ``locations`` (n, 2) and ``kernels`` (n, side, side).
* Metrics are JSON.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .geometry import Intrinsics, PlaneParams, PoseGrid
from .synthesis import TSF

# distinct colors for up to 8 plane labels in palettized mask PNGs
_LABEL_PALETTE = [
    (40, 40, 40), (230, 80, 60), (70, 150, 230), (90, 200, 110),
    (240, 200, 70), (180, 100, 220), (100, 220, 220), (240, 140, 200),
]


class SceneConfigError(ValueError):
    """Scene file violates the schema; message carries the YAML line."""

    def __init__(self, message: str, node=None):
        self.line = node.start_mark.line + 1 if node is not None else None
        prefix = f"line {self.line}: " if self.line is not None else ""
        super().__init__(prefix + message)


# ---------------------------------------------------------------------------
# scene configuration files
# ---------------------------------------------------------------------------

def _mapping_get(node, key):
    if not isinstance(node, yaml.MappingNode):
        raise SceneConfigError(f"expected a mapping while looking for '{key}'", node)
    for k, v in node.value:
        if k.value == key:
            return v
    return None


def _require(node, key):
    child = _mapping_get(node, key)
    if child is None:
        raise SceneConfigError(f"missing required key '{key}'", node)
    return child


def _scalar(node, key, cast, kind):
    try:
        return cast(node.value)
    except (TypeError, ValueError):
        raise SceneConfigError(f"'{key}' must be {kind}, got {node.value!r}", node)


def _as_int(node, key):
    if not isinstance(node, yaml.ScalarNode):
        raise SceneConfigError(f"'{key}' must be an integer", node)
    return _scalar(node, key, int, "an integer")


def _as_float(node, key):
    if not isinstance(node, yaml.ScalarNode):
        raise SceneConfigError(f"'{key}' must be a number", node)
    return _scalar(node, key, float, "a number")


def _as_str(node, key):
    if not isinstance(node, yaml.ScalarNode):
        raise SceneConfigError(f"'{key}' must be a string", node)
    return str(node.value)


def _as_float_list(node, key, length=None):
    if not isinstance(node, yaml.SequenceNode):
        raise SceneConfigError(f"'{key}' must be a list", node)
    vals = [_as_float(c, key) for c in node.value]
    if length is not None and len(vals) != length:
        raise SceneConfigError(f"'{key}' must have {length} entries, got {len(vals)}", node)
    return vals


def _as_int_list(node, key):
    if not isinstance(node, yaml.SequenceNode):
        raise SceneConfigError(f"'{key}' must be a list", node)
    return [_as_int(c, key) for c in node.value]


def _axis_spec(node, key):
    vals = _as_float_list(node, key, length=3)
    lo, hi, n = vals
    if int(n) != n or n < 1:
        raise SceneConfigError(f"'{key}' count must be a positive integer", node)
    return (lo, hi, int(n))


def _parse_texture(node):
    tex = {"seed": 0, "patches": 40, "clear_columns": []}
    if node is None:
        return tex
    seed = _mapping_get(node, "seed")
    if seed is not None:
        tex["seed"] = _as_int(seed, "seed")
    patches = _mapping_get(node, "patches")
    if patches is not None:
        tex["patches"] = _as_int(patches, "patches")
        if tex["patches"] < 0:
            raise SceneConfigError("'patches' must be nonnegative", patches)
    clear = _mapping_get(node, "clear_columns")
    if clear is not None:
        if not isinstance(clear, yaml.SequenceNode):
            raise SceneConfigError("'clear_columns' must be a list of [start, stop] pairs", clear)
        for band in clear.value:
            a, b = _as_float_list(band, "clear_columns", length=2)
            if not a < b:
                raise SceneConfigError("clear band must satisfy start < stop", band)
            tex["clear_columns"].append((int(a), int(b)))
    return tex


def _parse_planes(node):
    if not isinstance(node, yaml.SequenceNode) or not node.value:
        raise SceneConfigError("'planes' must be a non-empty list", node)
    planes = []
    for item in node.value:
        normal = _as_float_list(_require(item, "normal"), "normal", length=3)
        if abs(normal[2]) < 1e-12:
            raise SceneConfigError("plane normal must have a nonzero z component",
                                   _mapping_get(item, "normal"))
        scale_node = _mapping_get(item, "scale")
        scale = _as_float(scale_node, "scale") if scale_node is not None else 1.0
        if scale <= 0:
            raise SceneConfigError("'scale' must be positive", scale_node)
        planes.append({"normal": tuple(normal), "scale": scale})
    if not any(abs(p["scale"] - 1.0) < 1e-9 for p in planes):
        raise SceneConfigError("one plane must sit at the reference depth (scale 1)", node)
    return planes


def _parse_trajectory(node):
    file_node = _mapping_get(node, "file")
    if file_node is not None:
        return {"file": _as_str(file_node, "file")}
    kind_node = _mapping_get(node, "kind")
    kind = _as_str(kind_node, "kind") if kind_node is not None else "walk"
    if kind == "sweep":
        traj = {"kind": "sweep", "steps": 60, "ease": 0.0,
                "curve": (0.0, 0.0, 0.0)}
        traj["start"] = tuple(_as_float_list(_require(node, "start"), "start", 3))
        traj["stop"] = tuple(_as_float_list(_require(node, "stop"), "stop", 3))
        curve = _mapping_get(node, "curve")
        if curve is not None:
            traj["curve"] = tuple(_as_float_list(curve, "curve", 3))
        for key, cast in (("steps", _as_int), ("ease", _as_float)):
            child = _mapping_get(node, key)
            if child is not None:
                traj[key] = cast(child, key)
        if traj["steps"] < 2:
            raise SceneConfigError("sweep 'steps' must be at least 2", node)
        if not 0.0 <= traj["ease"] < 0.159:
            raise SceneConfigError("'ease' must be in [0, 0.159)", node)
        return traj
    if kind != "walk":
        raise SceneConfigError(f"unknown trajectory kind '{kind}'", kind_node)
    traj = {"kind": "walk", "seed": 0, "steps": 60, "sigma": 0.0008,
            "theta_sigma": 0.0, "momentum": 0.7, "limit": 0.005}
    for key, cast in (("seed", _as_int), ("steps", _as_int), ("sigma", _as_float),
                      ("theta_sigma", _as_float), ("momentum", _as_float),
                      ("limit", _as_float)):
        child = _mapping_get(node, key)
        if child is not None:
            traj[key] = cast(child, key)
    if traj["steps"] < 1:
        raise SceneConfigError("'steps' must be at least 1", node)
    if not 0.0 <= traj["momentum"] < 1.0:
        raise SceneConfigError("'momentum' must be in [0, 1)", node)
    return traj


def parse_scene_config(text: str) -> dict:
    """Validate scene YAML text; errors carry the offending line number."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f"line {mark.line + 1}: " if mark is not None else ""
        raise SceneConfigError(f"{line}not valid YAML ({e})") from e
    if root is None or not isinstance(root, yaml.MappingNode):
        raise SceneConfigError("scene file must be a YAML mapping", root)

    cfg = {}
    cfg["name"] = _as_str(_require(root, "name"), "name")
    size_node = _require(root, "size")
    if not isinstance(size_node, yaml.SequenceNode) or len(size_node.value) != 2:
        raise SceneConfigError("'size' must be [height, width]", size_node)
    h, w = (_as_int(c, "size") for c in size_node.value)
    if h < 16 or w < 16:
        raise SceneConfigError("'size' must be [height, width] with both >= 16", size_node)
    cfg["size"] = (h, w)

    focal = _mapping_get(root, "focal_length")
    cfg["focal_length"] = _as_float(focal, "focal_length") if focal is not None else 1000.0
    if cfg["focal_length"] <= 0:
        raise SceneConfigError("'focal_length' must be positive", focal)

    cfg["texture"] = _parse_texture(_mapping_get(root, "texture"))
    cfg["planes"] = _parse_planes(_require(root, "planes"))

    bounds_node = _mapping_get(root, "boundaries")
    bounds = _as_int_list(bounds_node, "boundaries") if bounds_node is not None else []
    if len(bounds) != len(cfg["planes"]) - 1:
        raise SceneConfigError(
            f"{len(cfg['planes'])} planes need {len(cfg['planes']) - 1} "
            f"boundaries, got {len(bounds)}", bounds_node or root)
    if any(b <= 0 or b >= w for b in bounds) or sorted(bounds) != bounds or \
            len(set(bounds)) != len(bounds):
        raise SceneConfigError("boundaries must be strictly increasing columns "
                               "inside the image", bounds_node)
    cfg["boundaries"] = bounds

    cfg["trajectory"] = _parse_trajectory(_require(root, "trajectory"))

    grid_node = _require(root, "grid")
    grid = {}
    for axis in ("tx", "ty", "theta"):
        grid[axis] = _axis_spec(_require(grid_node, axis), axis)
    try:
        PoseGrid.from_ranges(grid["tx"], grid["ty"], grid["theta"])
    except ValueError as e:
        raise SceneConfigError(f"invalid pose grid: {e}", grid_node) from e
    cfg["grid"] = grid

    scale_node = _mapping_get(root, "scale_range")
    if scale_node is not None:
        lo, hi, step = _as_float_list(scale_node, "scale_range", length=3)
        if not (lo < 1.0 < hi and step > 0):
            raise SceneConfigError("'scale_range' must be [lo, hi, step] with "
                                   "lo < 1 < hi and step > 0", scale_node)
        if abs((1.0 - lo) / step - round((1.0 - lo) / step)) > 1e-9:
            raise SceneConfigError("'scale_range' grid must contain 1.0",
                                   scale_node)
        cfg["scale_range"] = (lo, hi, step)
    else:
        cfg["scale_range"] = (0.70, 1.40, 0.025)

    radius_node = _mapping_get(root, "kernel_radius")
    cfg["kernel_radius"] = _as_int(radius_node, "kernel_radius") \
        if radius_node is not None else 13
    if cfg["kernel_radius"] < 2:
        raise SceneConfigError("'kernel_radius' must be at least 2", radius_node)

    patch_node = _mapping_get(root, "patch")
    cfg["patch"] = {"size": 120, "overlap": 50}
    if patch_node is not None:
        for key in ("size", "overlap"):
            child = _mapping_get(patch_node, key)
            if child is not None:
                cfg["patch"][key] = _as_int(child, key)
    if not 0 <= cfg["patch"]["overlap"] < cfg["patch"]["size"]:
        raise SceneConfigError("patch overlap must be in [0, size)", patch_node or root)
    return cfg


def load_scene_config(path) -> dict:
    return parse_scene_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

def save_image(path, image: np.ndarray, bits: int = 8) -> None:
    """Save a float image in [0, 1] as an 8- or 16-bit PNG."""
    image = np.asarray(image, dtype=float)
    if bits == 8:
        arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    elif bits == 16:
        arr = np.clip(np.round(image * 65535.0), 0, 65535).astype(np.uint16)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    Image.fromarray(arr).save(Path(path))


def load_image(path) -> np.ndarray:
    """Load a PNG back to float in [0, 1] (grayscale or RGB)."""
    img = Image.open(Path(path))
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(float) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(float) / 65535.0
    raise ValueError(f"unsupported PNG sample type {arr.dtype}")


def save_labels(path, labels: np.ndarray) -> None:
    """Save a small-integer label map as a palettized PNG."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= len(_LABEL_PALETTE):
        raise ValueError(f"labels must lie in [0, {len(_LABEL_PALETTE) - 1}]")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    palette = [c for rgb in _LABEL_PALETTE for c in rgb]
    img.putpalette(palette + [0] * (768 - len(palette)))
    img.save(Path(path))


def load_labels(path) -> np.ndarray:
    img = Image.open(Path(path))
    if img.mode != "P":
        raise ValueError("label map must be a palettized PNG")
    return np.asarray(img).astype(int)


def save_depth(path, depth: np.ndarray) -> tuple[float, float]:
    """Save a depth map as 16-bit PNG; returns the (min, max) scaling range."""
    depth = np.asarray(depth, dtype=float)
    lo, hi = float(depth.min()), float(depth.max())
    span = hi - lo if hi > lo else 1.0
    save_image(path, (depth - lo) / span, bits=16)
    return lo, hi


def load_depth(path, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return load_image(path) * span + lo


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def save_trajectory(path, times: np.ndarray, poses: np.ndarray) -> None:
    header = ("camera trajectory: time, tx/d0, ty/d0, thetaZ (rad); "
              "rows are exposure-ordered samples")
    data = np.column_stack([np.asarray(times, dtype=float),
                            np.asarray(poses, dtype=float)])
    np.savetxt(Path(path), data, header=header, fmt="%.9g")


def load_trajectory(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(Path(path), ndmin=2)
    if data.shape[1] != 4:
        raise ValueError("trajectory rows must be 'time tx ty theta'")
    return data[:, 0], data[:, 1:]


# ---------------------------------------------------------------------------
# sidecar (ground truth sufficient to re-run every oracle test)
# ---------------------------------------------------------------------------

def grid_to_dict(grid: PoseGrid) -> dict:
    def axis(a):
        return [float(a[0]), float(a[-1]), int(len(a))]
    return {"tx": axis(grid.tx_axis), "ty": axis(grid.ty_axis),
            "theta": axis(grid.theta_axis)}


def grid_from_dict(d: dict) -> PoseGrid:
    return PoseGrid.from_ranges(tuple(d["tx"]), tuple(d["ty"]), tuple(d["theta"]))


def tsf_to_dict(tsf: TSF) -> dict:
    return {"grid": grid_to_dict(tsf.grid),
            "indices": [int(i) for i in tsf.indices],
            "weights": [float(w) for w in tsf.weights]}


def tsf_from_dict(d: dict) -> TSF:
    return TSF(grid_from_dict(d["grid"]), np.array(d["indices"]),
               np.array(d["weights"]))


def planes_to_dicts(planes: list[PlaneParams]) -> list[dict]:
    return [{"normal": [float(v) for v in p.normal], "scale": float(p.scale)}
            for p in planes]


def planes_from_dicts(items: list[dict]) -> list[PlaneParams]:
    return [PlaneParams(tuple(d["normal"]), d["scale"]) for d in items]


def save_sidecar(path, sidecar: dict) -> None:
    Path(path).write_text(yaml.safe_dump(sidecar, sort_keys=False))


def load_sidecar(path) -> dict:
    return yaml.safe_load(Path(path).read_text())


def save_psf_field(path, locations: np.ndarray, kernels: np.ndarray) -> None:
    """Oracle kernels at patch centers: locations (n, 2), kernels (n, s, s)."""
    locations = np.asarray(locations, dtype=float)
    kernels = np.asarray(kernels, dtype=float)
    if len(locations) != len(kernels):
        raise ValueError("one kernel per location required")
    np.savez_compressed(Path(path), locations=locations, kernels=kernels)


def load_psf_field(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(Path(path)) as data:
        return data["locations"].copy(), data["kernels"].copy()


def save_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def load_metrics(path) -> dict:
    return json.loads(Path(path).read_text())


def intrinsics_from_config(cfg: dict) -> Intrinsics:
    return Intrinsics(cfg["focal_length"])
