"""
Shared fixtures
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.geometry import Camera, CameraFrame, Intrinsics, Pose
from src.synthetic import SyntheticScene, Trajectory, generate_synthetic


@pytest.fixture
def intrinsics():
    """100 px focal, principal point at (50, 50)"""
    return Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
    """Random proper rotation (QR of a Gaussian matrix) plus random translation"""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose(q, rng.normal(size=3) * translation_scale)


def make_frame(index: int, image: np.ndarray, camera: Camera, depth=None, split: str = "input") -> CameraFrame:
    return CameraFrame(index=index, image=image, camera=camera, depth=depth, name=f"frame_{index:04d}", split=split)


@pytest.fixture(scope="session")
def small_room():
    """Three orbit views of the default room at 64 x 48"""
    desc = SyntheticScene(trajectory=Trajectory(num_views=3), width=64, height=48, focal=48.0, seed=3)
    return desc, generate_synthetic(desc).frames


def globals_on_rays(camera: Camera, pixels, depths, weight: float = 0.5):
    """Global triplets placed on the exact rays of (x, y) pixels"""
    from src.gaussian_map import FEATURE_DIM, GlobalTriplets
    from src.geometry import unproject_pixels

    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    centers = unproject_pixels(camera.intrinsics, camera.pose, pixels[:, 0], pixels[:, 1], depths)
    n = len(depths)
    return GlobalTriplets(
        centers=centers,
        weights=np.full(n, weight, dtype=np.float64),
        features=np.zeros((n, FEATURE_DIM)),
        betas=np.ones(n),
        depths=depths.copy(),
        focals=np.full(n, camera.intrinsics.mean_focal),
    )
