"""
Tests for image and depth metrics
"""

import numpy as np
import pytest

from src.errors import GeometryError
from src.metrics import SSIM_C1, _window_matrix, depth_metrics, psnr, ssim, ssim_with_grad


@pytest.fixture
def textured(rng):
    return rng.random((24, 20, 3))


class TestPsnr:
    def test_identical(self, textured):
        assert psnr(textured, textured) == 99.0

    def test_zero_vs_one(self):
        assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)

    def test_uniform_difference(self):
        assert psnr(np.full((4, 4), 0.5), np.full((4, 4), 0.6)) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    """Windowed structural similarity"""

    def test_identical(self, textured):
        assert ssim(textured, textured) == pytest.approx(1.0)

    def test_negative_image(self, textured):
        assert ssim(textured, 1.0 - textured) < 0.0

    def test_constant_images(self):
        a, b = 0.75, 0.25
        expected = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
        assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, rel=1e-9)

    def test_window_rows_normalised(self):
        np.testing.assert_allclose(_window_matrix(17).sum(axis=1), 1.0)

    def test_value_matches_ssim(self, textured, rng):
        other = np.clip(textured + rng.normal(0, 0.1, textured.shape), 0, 1)
        value, grad = ssim_with_grad(textured, other)
        assert value == pytest.approx(ssim(textured, other))
        assert grad.shape == textured.shape

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.random((10, 12, 2))
        b = rng.random((10, 12, 2))
        _, grad = ssim_with_grad(a, b)
        h = 1e-6
        for index in [(0, 0, 0), (3, 5, 1), (9, 11, 0), (5, 6, 1), (2, 9, 0)]:
            plus, minus = a.copy(), a.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (ssim(plus, b) - ssim(minus, b)) / (2 * h)
            assert grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_grayscale_gradient_shape(self, rng):
        _, grad = ssim_with_grad(rng.random((8, 8)), rng.random((8, 8)))
        assert grad.shape == (8, 8)


class TestDepthMetrics:
    """Abs/rel errors and threshold accuracies"""

    def test_exact(self):
        gt = np.full((4, 4), 2.0)
        result = depth_metrics(gt, gt)
        assert result["abs_diff"] == 0.0 and result["abs_rel"] == 0.0
        assert result["delta_1.25"] == 1.0 and result["delta_1.1"] == 1.0
        assert result["valid_pixels"] == 16

    def test_uniform_scale(self):
        gt = np.full((4, 4), 2.0)
        result = depth_metrics(1.2 * gt, gt)
        assert result["delta_1.25"] == 1.0
        assert result["delta_1.1"] == 0.0
        assert result["abs_rel"] == pytest.approx(0.2)

    def test_mixture(self):
        gt = np.full((4, 4), 2.0)
        pred = gt.copy()
        pred[:2] *= 2.0
        assert depth_metrics(pred, gt)["delta_1.1"] == pytest.approx(0.5)

    def test_invalid_pixels_ignored(self):
        gt = np.full((2, 2), 2.0)
        pred = np.array([[2.0, 0.0], [2.0, 2.0]])
        assert depth_metrics(pred, gt)["valid_pixels"] == 3

    def test_nothing_valid(self):
        with pytest.raises(GeometryError):
            depth_metrics(np.zeros((2, 2)), np.ones((2, 2)))
