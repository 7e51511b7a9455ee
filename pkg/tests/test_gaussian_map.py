"""
Tests for view lifting, decoding and triplet containers
"""

import numpy as np
import pytest
from scipy.special import logit

from src.errors import GeometryError
from src.gaussian_map import (
    COLOR,
    CONFIDENCE_LOGIT,
    FEATURE_DIM,
    LOG_SCALE,
    OPACITY_LOGIT,
    GlobalTriplets,
    decode_gaussians,
    lift_view,
    merge_unfused,
    resample_depth,
)
from src.geometry import Camera, CameraFrame, Intrinsics, Pose, project_points


def _frame(height, width, focal=10.0, color=0.5):
    K = Intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)
    return CameraFrame(0, np.full((height, width, 3), color), Camera(K, Pose.identity()))


def _global(depths, focal=500.0, seed=0.0, opacity_logit=0.0, betas=None):
    n = len(depths)
    features = np.zeros((n, FEATURE_DIM))
    features[:, LOG_SCALE] = seed
    features[:, OPACITY_LOGIT] = opacity_logit
    return GlobalTriplets(
        centers=np.zeros((n, 3)),
        weights=np.full(n, 0.5),
        features=features,
        betas=np.ones(n) if betas is None else np.asarray(betas, dtype=np.float64),
        depths=np.asarray(depths, dtype=np.float64),
        focals=np.full(n, focal),
    )


class TestLiftView:
    """Unprojection of depth maps into pixel-aligned triplets"""

    def test_direct_unprojection(self):
        frame = _frame(2, 2)
        local = lift_view(frame, np.ones((2, 2)), np.full((2, 2), 0.5), stride=1)
        assert local.size == 4
        np.testing.assert_allclose(local.depths, 1.0)
        uv, depth, _ = project_points(frame.camera.intrinsics, frame.camera.pose, local.centers)
        np.testing.assert_allclose(depth, 1.0)
        np.testing.assert_allclose(uv, local.pixels, atol=1e-12)

    def test_stride_count(self):
        local = lift_view(_frame(4, 4), np.ones((4, 4)), np.full((4, 4), 0.5), stride=2)
        assert local.size == 4
        assert local.grid_shape == (2, 2)

    def test_invalid_depth_skipped(self):
        depth = np.ones((2, 2))
        depth[0, 1] = 0.0
        local = lift_view(_frame(2, 2), depth, np.full((2, 2), 0.5), stride=1)
        assert local.size == 3
        assert 1 not in local.pixel_index

    def test_feature_seeds(self):
        local = lift_view(_frame(4, 4, color=0.25), np.full((4, 4), 2.0), np.full((4, 4), 0.8), 1, 0.9)
        np.testing.assert_allclose(local.features[:, COLOR], 0.25)
        np.testing.assert_allclose(local.features[:, OPACITY_LOGIT], logit(0.9))
        np.testing.assert_allclose(local.features[:, CONFIDENCE_LOGIT], logit(0.8))
        np.testing.assert_allclose(local.features[:, LOG_SCALE], 0.0)

    def test_weights_clamped(self):
        local = lift_view(_frame(2, 2), np.ones((2, 2)), np.ones((2, 2)), stride=1)
        np.testing.assert_allclose(local.weights, 0.99)

    def test_all_invalid_raises(self):
        with pytest.raises(GeometryError):
            lift_view(_frame(2, 2), np.zeros((2, 2)), np.ones((2, 2)), stride=1)

    def test_bad_stride_raises(self):
        with pytest.raises(GeometryError):
            lift_view(_frame(4, 4), np.ones((4, 4)), np.ones((4, 4)), stride=3)

    def test_depth_map_round_trip(self, small_room):
        _, frames = small_room
        frame = frames[0]
        local = lift_view(frame, frame.depth, np.full(frame.depth.shape, 0.9), stride=2)
        assert local.depth_map().shape == (24, 32)
        assert np.all(local.depth_map().ravel()[local.pixel_index] == local.depths)


class TestResampleDepth:
    def test_consistent_block_averages(self):
        depth = np.array([[1.0, 1.02], [1.01, 1.03]])
        np.testing.assert_allclose(resample_depth(depth, (1, 1)), [[1.015]])

    def test_edge_block_keeps_nearest(self):
        depth = np.array([[1.0, 3.0], [1.0, 3.0]])
        np.testing.assert_allclose(resample_depth(depth, (1, 1)), [[1.0]])

    def test_partially_invalid_block(self):
        depth = np.array([[0.0, 2.0], [2.0, 2.0]])
        np.testing.assert_allclose(resample_depth(depth, (1, 1)), [[2.0]])


class TestDecode:
    """Deterministic decoding of fused triplets"""

    def test_closed_form_scale(self):
        prims = decode_gaussians(_global([2.0], focal=500.0), base_scale_px=1.5)
        np.testing.assert_allclose(prims.scales, 0.006)
        np.testing.assert_allclose(prims.quaternions, [[1.0, 0.0, 0.0, 0.0]])

    def test_opacity_saturation(self):
        prims = decode_gaussians(_global([1.0], opacity_logit=50.0))
        assert prims.opacities[0] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)))

    def test_beta_scales_opacity(self):
        prims = decode_gaussians(_global([1.0], betas=[0.25]))
        assert prims.opacities[0] == pytest.approx(0.125)

    def test_scale_clamped(self):
        prims = decode_gaussians(_global([1.0], seed=20.0))
        np.testing.assert_allclose(prims.scales, 1.0)

    def test_empty_raises(self):
        with pytest.raises(GeometryError):
            decode_gaussians(GlobalTriplets())


class TestMergeUnfused:
    def test_first_view(self):
        local = lift_view(_frame(2, 5), np.ones((2, 5)), np.full((2, 5), 0.5), stride=1)
        merged = merge_unfused(GlobalTriplets(), local)
        assert merged.size == 10
        np.testing.assert_allclose(merged.betas, 1.0)
        np.testing.assert_allclose(merged.focals, 10.0)

    def test_nothing_unaligned(self):
        g = _global([1.0] * 5)
        local = lift_view(_frame(2, 2), np.ones((2, 2)), np.ones((2, 2)), stride=1)
        merged = merge_unfused(g, local.subset(np.zeros(4, dtype=bool)))
        assert merged is g
        assert merged.size == 5
