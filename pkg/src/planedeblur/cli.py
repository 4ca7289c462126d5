"""Command-line interface: synthesize / estimate-normals / deblur / evaluate.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .fileio import SceneConfigError
from .geometry import plane_depth_map
from .metrics import luminance
from .pipeline import (ExperimentConfig, estimate_scene_normals, metrics_report,
                       psf_field_source, oracle_psf_field, run_deblur)
from .scenes import bundled_config, bundled_scene_names, render_scene
from .synthesis import SegmentationMasks

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared flags
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """Tunables mirroring ExperimentConfig; None means keep the default."""
    g = p.add_argument_group("pipeline tunables")
    g.add_argument("--focal-length", type=float, default=None,
                   help="focal length in pixels (default 1000)")
    g.add_argument("--patch-size", type=int, default=None,
                   help="analysis patch size in pixels (default 120)")
    g.add_argument("--patch-overlap", type=int, default=None,
                   help="analysis patch overlap in pixels (default 50)")
    g.add_argument("--kernel-radius", type=int, default=None,
                   help="PSF kernel radius in pixels (default 13)")
    g.add_argument("--ransac-threshold-deg", type=float, default=None,
                   help="RANSAC inlier threshold in degrees (default 11)")
    g.add_argument("--lam-omega", type=float, default=None,
                   help="TSF sparsity weight (default 0.1)")
    g.add_argument("--lam-f", type=float, default=None,
                   help="latent-image TV weight (default 0.002)")
    g.add_argument("--lam-l", type=float, default=None,
                   help="segmentation smoothness weight")
    g.add_argument("--smoothness-base", type=float, default=None,
                   help="label-distance decay base r (default 0.8)")
    g.add_argument("--iterations", type=int, default=None,
                   help="outer AM iterations (default 5)")
    g.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default 0)")
    g.add_argument("--jobs", type=int, default=None,
                   help="worker cap for internal parallelism (default 1)")


def _config_overrides(args) -> dict:
    names = ["focal_length", "patch_size", "patch_overlap", "kernel_radius",
             "ransac_threshold_deg", "lam_omega", "lam_f", "lam_l",
             "smoothness_base", "iterations", "seed", "jobs"]
    return {n: getattr(args, n) for n in names
            if getattr(args, n, None) is not None}


def _load_scene_cfg(args) -> dict:
    if args.bundled is not None:
        return bundled_config(args.bundled)
    return fileio.load_scene_config(args.scene)


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    cfg = _load_scene_cfg(args)
    if args.seed is not None:
        cfg.setdefault("texture", {})["seed"] = args.seed
    base_dir = Path(args.scene).parent if args.scene else None
    render = render_scene(cfg, base_dir=base_dir)
    econf = ExperimentConfig.from_scene(cfg, **_config_overrides(args))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_image(out / "blurred.png", render.blurred, bits=16)
    fileio.save_image(out / "latent.png", render.latent, bits=16)
    fileio.save_labels(out / "labels.png", render.truth_labels)
    labels = render.truth_labels
    depth = np.zeros(labels.shape, dtype=float)
    for i, plane in enumerate(render.scene.planes):
        mask = labels == i
        depth[mask] = plane_depth_map(plane, render.intrinsics,
                                      labels.shape)[mask]
    depth_range = fileio.save_depth(out / "depth.png", depth)
    fileio.save_trajectory(out / "trajectory.txt", render.times, render.poses)
    locs, kernels = oracle_psf_field(render, econf)
    fileio.save_psf_field(out / "psf_field.npz", locs, kernels)
    fileio.save_sidecar(out / "sidecar.yaml", {
        "name": cfg["name"],
        "grid": fileio.grid_to_dict(render.pose_grid),
        "tsf": fileio.tsf_to_dict(render.tsf),
        "planes": fileio.planes_to_dicts(render.scene.planes),
        "boundaries": [int(b) for b in cfg.get("boundaries", [])],
        "depth_range": [float(depth_range[0]), float(depth_range[1])],
        "focal_length": float(econf.focal_length),
        "kernel_radius": int(econf.kernel_radius),
        "patch": {"size": econf.patch_size, "overlap": econf.patch_overlap},
        "scale_range": list(econf.scale_range),
    })
    print(f"scene '{cfg['name']}' -> {out}")
    print(f"  image {render.blurred.shape[1]}x{render.blurred.shape[0]}, "
          f"{len(render.scene.planes)} plane(s), "
          f"{len(render.tsf.indices)} TSF cells")
    return 0


# ---------------------------------------------------------------------------
# estimate-normals
# ---------------------------------------------------------------------------

def _psf_source_from_args(args):
    if getattr(args, "oracle_psf", None):
        locs, kernels = fileio.load_psf_field(args.oracle_psf)
        return psf_field_source(locs, kernels)
    return None  # blind estimator


def cmd_estimate_normals(args) -> int:
    g = luminance(fileio.load_image(args.image))
    config = ExperimentConfig(**_config_overrides(args))
    report = estimate_scene_normals(g, config, _psf_source_from_args(args))
    if not report.hypotheses:
        raise NumericalFailure("no plane hypothesis survived RANSAC")

    rows = []
    for i, h in enumerate(report.hypotheses):
        n = h.normal
        rows.append({"plane": i, "normal": [float(v) for v in n],
                     "inliers": len(h.inliers)})
    payload = {"n_planes": len(report.hypotheses), "planes": rows,
               "n_samples": len(report.samples)}
    if args.out:
        fileio.save_metrics(args.out, payload)
    print(f"{payload['n_planes']} plane(s) from {payload['n_samples']} patches")
    for r in rows:
        nx, ny, nz = r["normal"]
        print(f"  plane {r['plane']}: n = ({nx:+.4f}, {ny:+.4f}, {nz:+.4f})"
              f"  inliers {r['inliers']}")
    return 0


# ---------------------------------------------------------------------------
# deblur
# ---------------------------------------------------------------------------

def cmd_deblur(args) -> int:
    g = fileio.load_image(args.image)
    sidecar = fileio.load_sidecar(args.sidecar)
    pose_grid = fileio.grid_from_dict(sidecar["grid"])
    overrides = _config_overrides(args)
    overrides.setdefault("focal_length", float(sidecar["focal_length"]))
    overrides.setdefault("kernel_radius", int(sidecar["kernel_radius"]))
    if "patch" in sidecar:
        overrides.setdefault("patch_size", int(sidecar["patch"]["size"]))
        overrides.setdefault("patch_overlap", int(sidecar["patch"]["overlap"]))
    if "scale_range" in sidecar:
        overrides.setdefault("scale_range", tuple(sidecar["scale_range"]))
    config = ExperimentConfig(**overrides)

    masks = None
    if args.oracle_masks:
        labels = fileio.load_labels(args.oracle_masks)
        masks = SegmentationMasks.from_labels(labels)
    result = run_deblur(g, pose_grid, config,
                        psf_source=_psf_source_from_args(args), masks=masks)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_image(out / "restored.png", np.clip(result.latent, 0.0, 1.0),
                      bits=16)
    fileio.save_labels(out / "masks.png", result.masks.labels())
    depth_range = fileio.save_depth(out / "depth.png", result.depth_map)
    fileio.save_sidecar(out / "estimate.yaml", {
        "tsf": fileio.tsf_to_dict(result.tsf),
        "planes": fileio.planes_to_dicts(result.planes),
        "reference_index": int(result.reference_index),
        "depth_range": [float(depth_range[0]), float(depth_range[1])],
    })

    metrics = None
    if args.reference:
        reference = fileio.load_image(args.reference)
        truth = fileio.load_labels(args.truth_labels) \
            if args.truth_labels else None
        metrics = metrics_report(result.latent, reference, blurred=g,
                                 border=config.kernel_radius,
                                 labels=result.masks.labels(),
                                 truth_labels=truth,
                                 runtimes=result.runtimes)
        fileio.save_metrics(out / "metrics.json", metrics)

    print(f"deblurred -> {out}  ({len(result.planes)} plane(s), "
          f"reference plane {result.reference_index})")
    for i, p in enumerate(result.planes):
        nx, ny, nz = p.normal
        print(f"  plane {i}: n = ({nx:+.4f}, {ny:+.4f}, {nz:+.4f})"
              f"  s = {p.scale:.3f}")
    if metrics:
        print(f"  PSNR {metrics['psnr_db']:.2f} dB"
              f" (gain {metrics.get('psnr_gain_db', 0.0):+.2f} dB),"
              f" SSIM {metrics['ssim']:.4f}")
        if "mask_accuracy" in metrics:
            print(f"  mask accuracy {metrics['mask_accuracy']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    restored = fileio.load_image(args.restored)
    reference = fileio.load_image(args.reference)
    blurred = fileio.load_image(args.blurred) if args.blurred else None
    labels = fileio.load_labels(args.labels) if args.labels else None
    truth = fileio.load_labels(args.truth_labels) if args.truth_labels else None
    metrics = metrics_report(restored, reference, blurred=blurred,
                             border=args.border, labels=labels,
                             truth_labels=truth)
    if args.out:
        fileio.save_metrics(args.out, metrics)
    print(f"PSNR {metrics['psnr_db']:.2f} dB   SSIM {metrics['ssim']:.4f}"
          f"   (border {args.border} px)")
    if "psnr_gain_db" in metrics:
        print(f"gain over blurred input {metrics['psnr_gain_db']:+.2f} dB")
    if "mask_accuracy" in metrics:
        print(f"mask accuracy {metrics['mask_accuracy']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planedeblur",
        description="Depth-aware blind motion deblurring of piecewise-planar "
                    "scenes: blur synthesis, plane-normal estimation, motion/"
                    "depth recovery, and latent-image restoration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize",
                       help="render a blurred scene plus ground-truth sidecar")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="scene config YAML")
    src.add_argument("--bundled", choices=bundled_scene_names(),
                     help="bundled scene name")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("estimate-normals",
                       help="plane count and normals from a blurred image")
    p.add_argument("--image", required=True, help="blurred image (PNG)")
    p.add_argument("--oracle-psf", metavar="NPZ",
                   help="PSF field sidecar; bypasses the blind estimator")
    p.add_argument("--out", help="write the plane report as JSON")
    _add_config_flags(p)
    p.set_defaults(func=cmd_estimate_normals)

    p = sub.add_parser("deblur",
                       help="full pipeline: restored image, depth, masks")
    p.add_argument("--image", required=True, help="blurred image (PNG)")
    p.add_argument("--sidecar", required=True,
                   help="scene sidecar YAML (pose grid + camera parameters)")
    p.add_argument("--oracle-psf", metavar="NPZ",
                   help="PSF field sidecar; bypasses the blind estimator")
    p.add_argument("--oracle-masks", metavar="PNG",
                   help="ground-truth labels; skips the segmentation updates")
    p.add_argument("--reference", help="sharp reference image for metrics")
    p.add_argument("--truth-labels", help="ground-truth labels for metrics")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("evaluate", help="metrics between two images")
    p.add_argument("--restored", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--blurred", help="blurred input, for the PSNR gain")
    p.add_argument("--labels", help="estimated label image")
    p.add_argument("--truth-labels", help="ground-truth label image")
    p.add_argument("--border", type=int, default=13,
                   help="boundary-fill crop in pixels (default 13)")
    p.add_argument("--out", help="write metrics as JSON")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SceneConfigError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
