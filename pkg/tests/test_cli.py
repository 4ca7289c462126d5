import json

import numpy as np
import pytest

from planedeblur import fileio
from planedeblur.cli import main

TINY_SCENE = """
name: cli-tiny
size: [64, 96]
texture: {seed: 9, patches: 40}
planes:
  - {normal: [0, 0, 1], scale: 1.0}
trajectory:
  kind: sweep
  start: [-0.004, -0.003, 0]
  stop: [0.004, 0.003, 0]
  curve: [0.001, 0, 0]
  steps: 40
grid:
  tx: [-0.0075, 0.0075, 7]
  ty: [-0.0075, 0.0075, 7]
  theta: [0, 0, 1]
kernel_radius: 11
patch: {size: 32, overlap: 16}
"""


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    """One synthesized tiny scene shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli-scene")
    scene = root / "scene.yaml"
    scene.write_text(TINY_SCENE)
    out = root / "out"
    assert main(["synthesize", "--scene", str(scene),
                 "--out", str(out)]) == 0
    return out


class TestSynthesize:
    def test_writes_complete_sidecar(self, scene_dir):
        for name in ["blurred.png", "latent.png", "labels.png", "depth.png",
                     "trajectory.txt", "psf_field.npz", "sidecar.yaml"]:
            assert (scene_dir / name).exists(), name

    def test_outputs_regenerate_scene(self, scene_dir):
        side = fileio.load_sidecar(scene_dir / "sidecar.yaml")
        tsf = fileio.tsf_from_dict(side["tsf"])
        assert tsf.weights.sum() == pytest.approx(1.0)
        blurred = fileio.load_image(scene_dir / "blurred.png")
        assert blurred.shape == (64, 96)

    def test_deterministic(self, scene_dir, tmp_path):
        scene = tmp_path / "scene.yaml"
        scene.write_text(TINY_SCENE)
        out2 = tmp_path / "out2"
        assert main(["synthesize", "--scene", str(scene),
                     "--out", str(out2)]) == 0
        a = fileio.load_image(scene_dir / "blurred.png")
        b = fileio.load_image(out2 / "blurred.png")
        assert np.array_equal(a, b)

    def test_bundled_scene_runs(self, tmp_path):
        assert main(["synthesize", "--bundled", "fronto-a",
                     "--out", str(tmp_path / "fa")]) == 0

    def test_bad_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(TINY_SCENE.replace("size: [64, 96]", "size: [64]"))
        assert main(["synthesize", "--scene", str(bad),
                     "--out", str(tmp_path / "x")]) == 2

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["synthesize", "--scene", str(tmp_path / "nope.yaml"),
                     "--out", str(tmp_path / "x")]) == 2


class TestEstimateNormals:
    def test_oracle_psf_single_plane(self, scene_dir, tmp_path):
        report = tmp_path / "normals.json"
        assert main(["estimate-normals",
                     "--image", str(scene_dir / "blurred.png"),
                     "--oracle-psf", str(scene_dir / "psf_field.npz"),
                     "--patch-size", "32", "--patch-overlap", "16",
                     "--out", str(report)]) == 0
        data = json.loads(report.read_text())
        assert data["n_planes"] == 1
        n = np.array(data["planes"][0]["normal"])
        ang = np.degrees(np.arccos(abs(n @ np.array([0.0, 0.0, 1.0]))))
        assert ang < 0.5


class TestDeblur:
    def test_full_run_with_metrics(self, scene_dir, tmp_path):
        out = tmp_path / "deblur"
        assert main(["deblur",
                     "--image", str(scene_dir / "blurred.png"),
                     "--sidecar", str(scene_dir / "sidecar.yaml"),
                     "--oracle-psf", str(scene_dir / "psf_field.npz"),
                     "--reference", str(scene_dir / "latent.png"),
                     "--iterations", "2",
                     "--out", str(out)]) == 0
        for name in ["restored.png", "masks.png", "depth.png",
                     "estimate.yaml", "metrics.json"]:
            assert (out / name).exists(), name
        metrics = fileio.load_metrics(out / "metrics.json")
        assert metrics["psnr_gain_db"] > 3.0


class TestEvaluate:
    def test_identical_images(self, scene_dir, tmp_path):
        out = tmp_path / "m.json"
        assert main(["evaluate",
                     "--restored", str(scene_dir / "latent.png"),
                     "--reference", str(scene_dir / "latent.png"),
                     "--border", "4", "--out", str(out)]) == 0
        m = fileio.load_metrics(out)
        assert m["psnr_db"] == 99.0
        assert m["ssim"] == pytest.approx(1.0)

    def test_gain_and_mask_fields(self, scene_dir, tmp_path):
        out = tmp_path / "m.json"
        assert main(["evaluate",
                     "--restored", str(scene_dir / "latent.png"),
                     "--reference", str(scene_dir / "latent.png"),
                     "--blurred", str(scene_dir / "blurred.png"),
                     "--labels", str(scene_dir / "labels.png"),
                     "--truth-labels", str(scene_dir / "labels.png"),
                     "--border", "4", "--out", str(out)]) == 0
        m = fileio.load_metrics(out)
        assert m["psnr_gain_db"] > 0.0
        assert m["mask_accuracy"] == 1.0
