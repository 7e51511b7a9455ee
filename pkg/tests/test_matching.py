"""
Tests for matching features, view selection, cost volumes and depth regression
"""

import numpy as np
import pytest

from conftest import random_pose
from src.errors import GeometryError
from src.geometry import Intrinsics, Pose
from src.matching import (
    CostVolume,
    FeatureMap,
    build_cost_volume,
    compute_matching_features,
    depth_planes,
    select_nearby_views,
    softargmax_depth,
    warp_features,
)


@pytest.fixture
def quarter_intrinsics():
    return Intrinsics(fx=20.0, fy=20.0, cx=15.5, cy=11.5, width=32, height=24)


def _volume(scores, planes):
    scores = np.asarray(scores, dtype=np.float64)
    return CostVolume(np.asarray(planes, dtype=np.float64), scores, np.ones(scores.shape, dtype=np.int32))


class TestMatchingFeatures:
    """Hand-crafted descriptor"""

    def test_quarter_resolution_unit_norm(self, rng):
        features = compute_matching_features(rng.random((32, 48, 3)))
        assert features.shape == (8, 12)
        np.testing.assert_allclose(np.linalg.norm(features.values, axis=0), 1.0)

    def test_constant_image(self):
        features = compute_matching_features(np.full((32, 32, 3), 0.4))
        flat = features.values.reshape(features.channels, -1)
        assert np.max(np.abs(flat - flat[:, :1])) < 1e-9
        assert np.max(np.abs(features.values[3:7])) < 1e-9

    def test_vertical_edge_response(self):
        image = np.zeros((32, 64, 3))
        image[:, 32:] = 1.0
        features = compute_matching_features(image)
        response = np.abs(features.values[3]).mean(axis=0)
        assert int(np.argmax(response)) in (7, 8)

    def test_rejects_tiny_image(self):
        with pytest.raises(GeometryError):
            compute_matching_features(np.zeros((2, 2, 3)))


class TestViewSelection:
    """Nearest-pose neighbour selection"""

    @staticmethod
    def _line_poses(xs):
        return [Pose(np.eye(3), np.array([-x, 0.0, 0.0])) for x in xs]

    def test_monotone_distances(self):
        assert select_nearby_views(self._line_poses([0, 1, 2, 3]), 0, 2) == [1, 2]

    def test_tie_prefers_lower_index(self):
        assert select_nearby_views(self._line_poses([0, 1, 2]), 1, 1) == [0]

    def test_matches_exhaustive_sort(self, rng):
        from src.matching import pose_distance

        poses = [random_pose(rng) for _ in range(8)]
        distances = [(pose_distance(poses[3], poses[i]), i) for i in range(8) if i != 3]
        expected = [i for _, i in sorted(distances)[:4]]
        assert select_nearby_views(poses, 3, 4) == expected

    def test_too_many_neighbours(self):
        with pytest.raises(GeometryError):
            select_nearby_views(self._line_poses([0, 1]), 0, 2)


class TestDepthPlanes:
    def test_endpoints_and_order(self):
        for spacing in ("uniform", "inverse"):
            planes = depth_planes(0.5, 8.0, 16, spacing)
            assert planes[0] == 0.5 and planes[-1] == 8.0
            assert np.all(np.diff(planes) > 0)

    def test_unknown_spacing(self):
        with pytest.raises(GeometryError):
            depth_planes(0.5, 8.0, 16, "log")


class TestWarping:
    """Plane-induced feature warps"""

    def test_identity_warp(self, quarter_intrinsics, rng):
        source = FeatureMap(rng.random((4, 24, 32)))
        warped, valid = warp_features(source, Pose.identity(), quarter_intrinsics, 2.0)
        assert valid.all()
        assert np.max(np.abs(warped.values - source.values)) < 1e-6

    def test_rejects_non_positive_plane(self, quarter_intrinsics, rng):
        with pytest.raises(GeometryError):
            warp_features(FeatureMap(rng.random((4, 24, 32))), Pose.identity(), quarter_intrinsics, 0.0)

    def test_self_match_scores_one(self, quarter_intrinsics, rng):
        features = compute_matching_features(rng.random((96, 128, 3)))
        volume = build_cost_volume(features, [(features, Pose.identity())], quarter_intrinsics, [1.0, 2.0, 4.0])
        np.testing.assert_allclose(volume.scores, 1.0, atol=1e-9)

    def test_consistent_plane_wins(self, quarter_intrinsics, rng):
        source = FeatureMap(rng.normal(size=(9, 24, 32)))
        transform = Pose(np.eye(3), np.array([0.3, 0.0, 0.0]))
        reference, _ = warp_features(source, transform, quarter_intrinsics, 2.0)
        volume = build_cost_volume(reference, [(source, transform)], quarter_intrinsics, [1.0, 2.0, 4.0])
        usable = volume.support.min(axis=0) > 0
        winners = np.argmax(volume.scores, axis=0)[usable]
        assert usable.sum() > 100
        assert np.mean(winners == 1) > 0.95

    def test_needs_neighbours(self, quarter_intrinsics, rng):
        with pytest.raises(GeometryError):
            build_cost_volume(FeatureMap(rng.random((4, 24, 32))), [], quarter_intrinsics, [1.0])


class TestSoftargmax:
    """Soft-argmax depth regression"""

    def test_peaked_distribution(self):
        scores = -np.ones((3, 2, 2))
        scores[1] = 1.0
        depth, confidence = softargmax_depth(_volume(scores, [1.0, 2.0, 4.0]), 0.01)
        np.testing.assert_allclose(depth, 2.0, atol=1e-4)
        assert np.all(confidence > 0.99)

    def test_uniform_scores_give_mean(self):
        planes = [1.0, 2.0, 4.0, 8.0]
        depth, _ = softargmax_depth(_volume(np.zeros((4, 3, 3)), planes), 0.05)
        np.testing.assert_allclose(depth, np.mean(planes), rtol=1e-12)

    def test_two_equal_peaks(self):
        scores = np.array([1.0, -1.0, 1.0])[:, None, None] * np.ones((3, 2, 2))
        depth, _ = softargmax_depth(_volume(scores, [1.0, 2.0, 3.0]), 0.01)
        np.testing.assert_allclose(depth, 2.0, atol=1e-9)

    def test_depth_within_plane_range(self, rng):
        planes = depth_planes(0.5, 6.0, 8)
        depth, _ = softargmax_depth(_volume(rng.uniform(-1, 1, (8, 5, 5)), planes), 0.3)
        assert depth.min() >= 0.5 and depth.max() <= 6.0

    def test_low_temperature_approaches_argmax(self, rng):
        planes = depth_planes(0.5, 6.0, 8)
        scores = rng.uniform(-1, 1, (8, 6, 6))
        best = np.argmax(scores, axis=0)
        np.put_along_axis(scores, best[None], np.take_along_axis(scores, best[None], 0) + 0.1, 0)
        depth, _ = softargmax_depth(_volume(scores, planes), 1e-3)
        assert np.max(np.abs(depth - planes[best])) < 1e-3

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(GeometryError):
            softargmax_depth(_volume(np.zeros((2, 1, 1)), [1.0, 2.0]), 0.0)
