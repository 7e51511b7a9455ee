"""
Tests for the tile-based rasterizer
"""

import numpy as np
import pytest

from src.errors import GeometryError
from src.gaussian_map import GaussianPrimitives
from src.geometry import COVARIANCE_FLOOR, Camera, Intrinsics, Pose
from src.renderer import ALPHA_CLAMP, RADIUS_SIGMAS, prepare_splats, render


@pytest.fixture
def camera():
    """32 x 32 with the principal point on pixel (16, 16)"""
    return Camera(Intrinsics(32.0, 32.0, 16.0, 16.0, 32, 32), Pose.identity())


def _prims(means, scales, opacities, colors):
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = len(means)
    quaternions = np.zeros((n, 4))
    quaternions[:, 0] = 1.0
    return GaussianPrimitives(
        means=means,
        quaternions=quaternions,
        scales=np.repeat(np.asarray(scales, dtype=np.float64).reshape(-1, 1), 3, axis=1),
        opacities=np.asarray(opacities, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.float64).reshape(-1, 3),
    )


def _random_prims(rng, n=40):
    means = np.stack([rng.uniform(-0.8, 0.8, n), rng.uniform(-0.8, 0.8, n), rng.uniform(1.0, 3.0, n)], axis=-1)
    prims = _prims(means, rng.uniform(0.02, 0.1, n), rng.uniform(0.1, 0.95, n), rng.random((n, 3)))
    prims.quaternions = rng.normal(size=(n, 4))
    prims.scales = rng.uniform(0.02, 0.1, (n, 3))
    return prims


class TestPrepareSplats:
    """Projection and culling"""

    def test_behind_camera_culled(self, camera):
        assert prepare_splats(_prims([0, 0, -2], [0.05], [0.8], [1, 0, 0]), camera).size == 0

    def test_zero_opacity_culled(self, camera):
        assert prepare_splats(_prims([0, 0, 2], [0.05], [0.0], [1, 0, 0]), camera).size == 0

    def test_off_image_culled(self, camera):
        assert prepare_splats(_prims([20, 0, 2], [0.01], [0.8], [1, 0, 0]), camera).size == 0

    def test_empty_input(self, camera):
        assert prepare_splats(GaussianPrimitives.empty(), camera).size == 0

    def test_isotropic_centre_splat(self, camera):
        scale, z = 0.1, 2.0
        splats = prepare_splats(_prims([0, 0, z], [scale], [0.8], [1, 0, 0]), camera)
        variance = (32.0 * scale / z) ** 2 + COVARIANCE_FLOOR
        np.testing.assert_allclose(splats.means2d[0], [16.0, 16.0])
        np.testing.assert_allclose(splats.conics[0], [1 / variance, 0.0, 1 / variance])
        assert splats.radii[0] == pytest.approx(RADIUS_SIGMAS * np.sqrt(variance))

    def test_sorted_front_to_back(self, camera):
        splats = prepare_splats(_prims([[0, 0, 3], [0, 0, 1], [0, 0, 2]], [0.05] * 3, [0.5] * 3, np.eye(3)), camera)
        assert splats.index.tolist() == [1, 2, 0]


class TestRender:
    """Alpha compositing"""

    def test_zero_gaussians(self, camera):
        out = render(GaussianPrimitives.empty(), camera)
        assert out.color.shape == (32, 32, 3)
        assert not out.color.any() and not out.depth.any() and not out.alpha.any()

    def test_single_splat_closed_form(self, camera):
        out = render(_prims([0, 0, 2], [0.1], [1.0], [1, 0, 0]), camera)
        np.testing.assert_allclose(out.color[16, 16], [ALPHA_CLAMP, 0.0, 0.0])
        assert out.depth[16, 16] == pytest.approx(ALPHA_CLAMP * 2.0)
        assert out.alpha[16, 16] == pytest.approx(ALPHA_CLAMP)

    def test_two_splat_blend(self, camera):
        prims = _prims([[0, 0, 1], [0, 0, 2]], [0.05, 0.1], [0.5, 0.5], [[1, 0, 0], [0, 0, 1]])
        out = render(prims, camera)
        np.testing.assert_allclose(out.color[16, 16], [0.5, 0.0, 0.25])
        assert out.depth[16, 16] == pytest.approx(1.0)

    def test_input_order_irrelevant(self, camera, rng):
        prims = _random_prims(rng)
        perm = rng.permutation(prims.size)
        a = render(prims, camera)
        b = render(prims.select(perm), camera)
        np.testing.assert_allclose(a.color, b.color, atol=1e-12)
        np.testing.assert_allclose(a.depth, b.depth, atol=1e-12)

    @pytest.mark.parametrize("tile_size", [8, 32])
    def test_tile_size_irrelevant(self, camera, rng, tile_size):
        prims = _random_prims(rng)
        reference = render(prims, camera, tile_size=16)
        out = render(prims, camera, tile_size=tile_size)
        np.testing.assert_allclose(out.color, reference.color, atol=1e-12)
        np.testing.assert_allclose(out.depth, reference.depth, atol=1e-12)
        np.testing.assert_allclose(out.alpha, reference.alpha, atol=1e-12)

    def test_zero_opacity_splats_change_nothing(self, camera, rng):
        prims = _random_prims(rng)
        ghosts = _random_prims(rng, 10)
        ghosts.opacities[:] = 0.0
        both = GaussianPrimitives(
            np.concatenate([prims.means, ghosts.means]),
            np.concatenate([prims.quaternions, ghosts.quaternions]),
            np.concatenate([prims.scales, ghosts.scales]),
            np.concatenate([prims.opacities, ghosts.opacities]),
            np.concatenate([prims.colors, ghosts.colors]),
        )
        np.testing.assert_array_equal(render(both, camera).color, render(prims, camera).color)

    def test_bounded_outputs(self, camera, rng):
        out = render(_random_prims(rng, 80), camera)
        assert out.alpha.max() <= 1.0 + 1e-12
        assert out.color.min() >= 0.0 and out.color.max() <= 1.0 + 1e-12
        assert np.all(out.depth[out.alpha < 1e-4] == 0.0)

    def test_opaque_stack_terminates(self, camera):
        n = 6
        prims = _prims(np.stack([np.zeros(n), np.zeros(n), 1.0 + 0.5 * np.arange(n)], axis=-1),
                       [0.2] * n, [0.95] * n, np.eye(3)[np.arange(n) % 3])
        out = render(prims, camera)
        # T before the fifth layer is 0.05 ** 4 < 1e-4
        expected_alpha = 1.0 - 0.05 ** 4
        assert out.alpha[16, 16] == pytest.approx(expected_alpha)

    def test_rejects_bad_tile_size(self, camera):
        with pytest.raises(GeometryError):
            render(GaussianPrimitives.empty(), camera, tile_size=12)
