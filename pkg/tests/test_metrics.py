import numpy as np
import pytest

from planedeblur.metrics import luminance, mask_accuracy, psnr, ssim


class TestPsnr:
    def test_identical_images_capped(self):
        img = np.random.default_rng(0).uniform(size=(40, 50))
        assert psnr(img, img) == 99.0

    def test_gaussian_noise_reference_level(self):
        rng = np.random.default_rng(1)
        ref = rng.uniform(0.2, 0.8, size=(200, 200))
        noise = rng.normal(0.0, 0.01, size=ref.shape)
        expected = 10.0 * np.log10(1.0 / np.mean(noise ** 2))
        assert psnr(ref + noise, ref) == pytest.approx(expected, abs=1e-9)
        assert psnr(ref + noise, ref) == pytest.approx(40.0, abs=0.1)

    def test_border_crop_excludes_edges(self):
        ref = np.full((30, 30), 0.5)
        bad = ref.copy()
        bad[0, :] = 1.0  # corrupt only the border
        assert psnr(bad, ref) < 99.0
        assert psnr(bad, ref, border=2) == 99.0

    def test_luminance_used_for_color(self):
        rng = np.random.default_rng(2)
        ref = rng.uniform(size=(20, 20, 3))
        assert psnr(ref, ref) == 99.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((10, 10)), np.zeros((12, 12)))

    def test_overlarge_border_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((10, 10)), np.zeros((10, 10)), border=5)


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(3).uniform(size=(40, 40))
        assert ssim(img, img) == pytest.approx(1.0)

    def test_negative_image_anticorrelates(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(size=(60, 60))
        assert ssim(1.0 - img, img) < 0.0

    def test_noise_reduces_similarity(self):
        rng = np.random.default_rng(5)
        ref = rng.uniform(size=(60, 60))
        noisy = ref + rng.normal(0, 0.1, size=ref.shape)
        assert 0.0 < ssim(noisy, ref) < 1.0


class TestLuminance:
    def test_grayscale_passthrough(self):
        img = np.random.default_rng(6).uniform(size=(8, 8))
        np.testing.assert_array_equal(luminance(img), img)

    def test_rec601_weights(self):
        img = np.zeros((2, 2, 3))
        img[..., 1] = 1.0
        np.testing.assert_allclose(luminance(img), 0.587)

    def test_bad_channel_count_rejected(self):
        with pytest.raises(ValueError):
            luminance(np.zeros((4, 4, 2)))


class TestMaskAccuracy:
    def test_perfect_match(self):
        labels = np.array([[0, 1], [1, 0]])
        assert mask_accuracy(labels, labels) == 1.0

    def test_partial_match(self):
        a = np.array([[0, 1], [1, 0]])
        b = np.array([[0, 1], [0, 0]])
        assert mask_accuracy(a, b) == 0.75

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mask_accuracy(np.zeros((2, 2)), np.zeros((3, 3)))
