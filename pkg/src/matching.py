"""
Matching
Deterministic matching features, nearby-view selection, plane-sweep cost volumes
and soft-argmax depth regression.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation
from scipy.special import softmax

from src.errors import GeometryError
from src.geometry import Intrinsics, Pose, pixel_grid

logger = logging.getLogger(__name__)

FEATURE_SCALE = 4
FEATURE_CHANNELS = 9
EPSILON_CHANNEL = 0.01
LOCAL_WINDOW = 5
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class FeatureMap:
    """Per-pixel matching descriptors, (C, h, w), unit L2 norm per pixel"""
    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[1:]

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class CostVolume:
    """Matching scores per depth plane"""
    planes: np.ndarray   # (K,) strictly increasing depths
    scores: np.ndarray   # (K, h, w)
    support: np.ndarray  # (K, h, w) number of neighbours with a valid sample

    @property
    def matched(self) -> np.ndarray:
        """Pixels with at least one valid neighbour sample at some plane"""
        return self.support.max(axis=0) > 0


def crop_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Crop bottom/right so both sides are divisible by `multiple` (principal point unchanged)"""
    height = (image.shape[0] // multiple) * multiple
    width = (image.shape[1] // multiple) * multiple
    return image[:height, :width]


def downsample(image: np.ndarray, stride: int) -> np.ndarray:
    """Box-average downsampling by an integer stride"""
    image = crop_to_multiple(np.asarray(image, dtype=np.float64), stride)
    if stride == 1:
        return image
    size = (image.shape[1] // stride, image.shape[0] // stride)
    return cv2.resize(image, size, interpolation=cv2.INTER_AREA)


def compute_matching_features(image: np.ndarray) -> FeatureMap:
    """
    Hand-crafted matching descriptor at quarter resolution

    Channels: 3 locally mean-subtracted colours, Sobel x/y of luma at two smoothing
    scales, local luma variance and a constant epsilon channel. Every pixel vector is
    L2-normalised afterwards.

    Args:
        image: H x W x 3 RGB in [0, 1]

    Returns:
        FeatureMap with 9 channels at (H/4, W/4)
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < FEATURE_SCALE or image.shape[1] < FEATURE_SCALE:
        raise GeometryError(f"Matching features need an H x W x 3 image of at least 4x4, got {image.shape}")

    quarter = downsample(image, FEATURE_SCALE)
    local_mean = ndimage.uniform_filter(quarter, size=(LOCAL_WINDOW, LOCAL_WINDOW, 1), mode="nearest")
    colors = np.moveaxis(quarter - local_mean, -1, 0)

    luma = quarter @ LUMA
    gradients = []
    for sigma in (0.5, 1.5):
        smooth = ndimage.gaussian_filter(luma, sigma, mode="nearest")
        gradients.append(ndimage.sobel(smooth, axis=1, mode="nearest") / 8.0)
        gradients.append(ndimage.sobel(smooth, axis=0, mode="nearest") / 8.0)

    mean = ndimage.uniform_filter(luma, LOCAL_WINDOW, mode="nearest")
    variance = np.maximum(ndimage.uniform_filter(luma * luma, LOCAL_WINDOW, mode="nearest") - mean * mean, 0.0)

    values = np.concatenate([
        colors,
        np.stack(gradients),
        variance[None],
        np.full((1,) + luma.shape, EPSILON_CHANNEL),
    ])
    values /= np.linalg.norm(values, axis=0, keepdims=True)
    return FeatureMap(values)


def local_variance(image: np.ndarray) -> np.ndarray:
    """Quarter-resolution luma variance (the texture channel before normalisation)"""
    luma = downsample(image, FEATURE_SCALE) @ LUMA
    mean = ndimage.uniform_filter(luma, LOCAL_WINDOW, mode="nearest")
    return np.maximum(ndimage.uniform_filter(luma * luma, LOCAL_WINDOW, mode="nearest") - mean * mean, 0.0)


def pose_distance(a: Pose, b: Pose, rotation_weight: float = 0.5) -> float:
    """Centre distance plus weighted relative rotation angle"""
    angle = Rotation.from_matrix(a.rotation @ b.rotation.T).magnitude()
    return float(np.linalg.norm(a.center - b.center) + rotation_weight * angle)


def select_nearby_views(
    poses: Sequence[Pose],
    t: int,
    N: int,
    rotation_weight: float = 0.5,
) -> List[int]:
    """
    Pick the N views closest in pose to view t

    Args:
        poses: World-to-camera poses of all views
        t: Reference view index
        N: Number of neighbours
        rotation_weight: Metres per radian of relative rotation

    Returns:
        Neighbour indices ordered by distance (ties -> lower index)
    """
    if N >= len(poses):
        raise GeometryError(f"Cannot select {N} neighbours among {len(poses)} views")
    candidates = np.array([i for i in range(len(poses)) if i != t])
    distances = np.array([pose_distance(poses[t], poses[i], rotation_weight) for i in candidates])
    order = np.lexsort((candidates, distances))
    return [int(i) for i in candidates[order[:N]]]


def depth_planes(d_near: float, d_far: float, num_planes: int, spacing: str = "inverse") -> np.ndarray:
    """Plane depths from d_near to d_far, uniform in depth or inverse depth"""
    if spacing == "uniform":
        planes = np.linspace(d_near, d_far, num_planes)
    elif spacing == "inverse":
        planes = 1.0 / np.linspace(1.0 / d_near, 1.0 / d_far, num_planes)
    else:
        raise GeometryError(f"Unknown plane spacing '{spacing}'")
    planes[0], planes[-1] = d_near, d_far
    return planes


def warp_features(
    F_src: FeatureMap,
    T: Pose,
    K: Intrinsics,
    d_k: float,
    K_src: Optional[Intrinsics] = None,
) -> Tuple[FeatureMap, np.ndarray]:
    """
    Resample source features onto the reference grid through the plane at depth d_k

    Args:
        F_src: Source view features
        T: Transform from the source camera frame to the reference camera frame
        K: Reference intrinsics at feature resolution
        d_k: Plane depth in the reference frame (m)
        K_src: Source intrinsics (defaults to K)

    Returns:
        Warped features and a validity mask (h, w); invalid samples are zero vectors
    """
    if d_k <= 0:
        raise GeometryError(f"Plane depth must be positive, got {d_k}")
    K_src = K_src or K
    height, width = K.height, K.width
    u, v = pixel_grid(height, width)
    ref = np.stack([(u - K.cx) / K.fx * d_k, (v - K.cy) / K.fy * d_k, np.full_like(u, d_k)], axis=-1)
    src = (ref - T.translation) @ T.rotation

    z = src[:, 2]
    in_front = z > 1e-9
    safe = np.where(in_front, z, 1.0)
    us = K_src.fx * src[:, 0] / safe + K_src.cx
    vs = K_src.fy * src[:, 1] / safe + K_src.cy
    src_h, src_w = F_src.shape
    valid = in_front & (us >= 0) & (us <= src_w - 1) & (vs >= 0) & (vs <= src_h - 1)

    warped = np.zeros((F_src.channels, height * width))
    if valid.any():
        coords = np.stack([vs[valid], us[valid]])
        for c in range(F_src.channels):
            warped[c, valid] = ndimage.map_coordinates(F_src.values[c], coords, order=1, mode="constant", cval=0.0)
    return FeatureMap(warped.reshape(-1, height, width)), valid.reshape(height, width)


def cosine_similarity(reference: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Channel-wise cosine similarity of (C, h, w) maps; zero where either norm vanishes"""
    dot = np.sum(reference * other, axis=0)
    norm = np.linalg.norm(reference, axis=0) * np.linalg.norm(other, axis=0)
    out = np.zeros_like(dot)
    np.divide(dot, norm, out=out, where=norm > 1e-12)
    return np.clip(out, -1.0, 1.0)


def build_cost_volume(
    F_ref: FeatureMap,
    neighbors: Sequence[Tuple[FeatureMap, Pose]],
    K: Intrinsics,
    planes: np.ndarray,
) -> CostVolume:
    """
    Plane-sweep cost volume of mean cosine similarities

    Args:
        F_ref: Reference features
        neighbors: (features, src->ref transform) per nearby view
        K: Feature-resolution intrinsics (shared by all views)
        planes: Increasing plane depths

    Returns:
        CostVolume; pixels without any valid neighbour sample score 0
    """
    if not neighbors:
        raise GeometryError("Cost volume needs at least one neighbour view")
    planes = np.asarray(planes, dtype=np.float64)
    height, width = F_ref.shape
    scores = np.zeros((len(planes), height, width))
    support = np.zeros((len(planes), height, width), dtype=np.int32)

    for k, depth in enumerate(planes):
        total = np.zeros((height, width))
        for features, transform in neighbors:
            warped, valid = warp_features(features, transform, K, depth)
            total += np.where(valid, cosine_similarity(F_ref.values, warped.values), 0.0)
            support[k] += valid
        np.divide(total, support[k], out=scores[k], where=support[k] > 0)

    logger.debug(f"Built cost volume {scores.shape} with {len(neighbors)} neighbours")
    return CostVolume(planes=planes, scores=scores, support=support)


def aggregate_cost_volume(cv: CostVolume, kernel: int = 3) -> CostVolume:
    """Spatial box smoothing of the scores, plane by plane"""
    if kernel <= 1:
        return cv
    scores = ndimage.uniform_filter(cv.scores, size=(1, kernel, kernel), mode="nearest")
    return CostVolume(planes=cv.planes, scores=scores, support=cv.support)


def softargmax_depth(cv: CostVolume, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Expected plane depth under softmax(scores / tau)

    Args:
        cv: Cost volume
        tau: Softmax temperature (> 0)

    Returns:
        depth map within [d_1, d_K] and confidence map (peak probability)
    """
    if tau <= 0:
        raise GeometryError(f"Temperature must be positive, got {tau}")
    probability = softmax(cv.scores / tau, axis=0)
    depth = np.tensordot(cv.planes, probability, axes=(0, 0))
    depth = np.clip(depth, cv.planes[0], cv.planes[-1])
    return depth, probability.max(axis=0)
