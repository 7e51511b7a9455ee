"""
Gaussian Map
Triplet and primitive containers, view lifting and deterministic decoding
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import cv2
import numpy as np
from scipy.special import expit, logit

from src.errors import GeometryError
from src.geometry import Camera, CameraFrame, pixel_grid, unproject_pixels
from src.matching import crop_to_multiple, downsample

logger = logging.getLogger(__name__)

# Triplet feature layout
FEATURE_DIM = 11
LOG_SCALE = 0
COLOR = slice(1, 4)
OPACITY_LOGIT = 4
CONFIDENCE_LOGIT = 5
RESERVED = slice(6, 11)

OPACITY_LOGIT_CAP = 10.0
WEIGHT_RANGE = (0.01, 0.99)
SCALE_RANGE = (1e-4, 1.0)
ALPHA_RANGE = (1e-12, 1.0 - 1e-12)
# relative depth spread above which a downsampling block is treated as a depth edge
EDGE_RATIO = 1.05


@dataclass
class LocalTriplets:
    """Pixel-aligned triplets lifted from one view"""
    view_id: int
    camera: Camera          # at lift resolution
    centers: np.ndarray     # (L, 3) world
    weights: np.ndarray     # (L,)
    features: np.ndarray    # (L, F)
    pixel_index: np.ndarray  # (L,) row-major index into the lift grid
    depths: np.ndarray      # (L,)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.camera.shape

    @property
    def pixels(self) -> np.ndarray:
        """(L, 2) integer pixel coordinates (x, y) in the lift grid"""
        width = self.grid_shape[1]
        return np.stack([self.pixel_index % width, self.pixel_index // width], axis=-1)

    def depth_map(self) -> np.ndarray:
        out = np.zeros(self.grid_shape)
        out.flat[self.pixel_index] = self.depths
        return out

    def weight_map(self) -> np.ndarray:
        out = np.zeros(self.grid_shape)
        out.flat[self.pixel_index] = self.weights
        return out

    def subset(self, mask: np.ndarray) -> "LocalTriplets":
        return replace(
            self,
            centers=self.centers[mask],
            weights=self.weights[mask],
            features=self.features[mask],
            pixel_index=self.pixel_index[mask],
            depths=self.depths[mask],
        )


@dataclass
class GlobalTriplets:
    """Fused scene-level triplets plus the WFR opacity factor"""
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    betas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    depths: np.ndarray = field(default_factory=lambda: np.zeros(0))   # lift depth
    focals: np.ndarray = field(default_factory=lambda: np.zeros(0))   # lift focal length (px)

    @property
    def size(self) -> int:
        return len(self.weights)

    @classmethod
    def from_local(cls, local: LocalTriplets) -> "GlobalTriplets":
        return cls(
            centers=local.centers.copy(),
            weights=local.weights.copy(),
            features=local.features.copy(),
            betas=np.ones(local.size),
            depths=local.depths.copy(),
            focals=np.full(local.size, local.camera.intrinsics.mean_focal),
        )

    def copy(self) -> "GlobalTriplets":
        return GlobalTriplets(
            self.centers.copy(), self.weights.copy(), self.features.copy(),
            self.betas.copy(), self.depths.copy(), self.focals.copy(),
        )

    def select(self, index: np.ndarray) -> "GlobalTriplets":
        return GlobalTriplets(
            self.centers[index], self.weights[index], self.features[index],
            self.betas[index], self.depths[index], self.focals[index],
        )

    def concatenate(self, other: "GlobalTriplets") -> "GlobalTriplets":
        return GlobalTriplets(
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.weights, other.weights]),
            np.concatenate([self.features, other.features]),
            np.concatenate([self.betas, other.betas]),
            np.concatenate([self.depths, other.depths]),
            np.concatenate([self.focals, other.focals]),
        )


@dataclass
class GaussianPrimitives:
    """Renderable isotropic-or-not 3D Gaussians with degree-0 colour"""
    means: np.ndarray        # (N, 3)
    quaternions: np.ndarray  # (N, 4) as (w, x, y, z)
    scales: np.ndarray       # (N, 3) metres
    opacities: np.ndarray    # (N,)
    colors: np.ndarray       # (N, 3) in [0, 1]

    @property
    def size(self) -> int:
        return len(self.opacities)

    @classmethod
    def empty(cls) -> "GaussianPrimitives":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def copy(self) -> "GaussianPrimitives":
        return GaussianPrimitives(
            self.means.copy(), self.quaternions.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(),
        )

    def select(self, index: np.ndarray) -> "GaussianPrimitives":
        return GaussianPrimitives(
            self.means[index], self.quaternions[index], self.scales[index],
            self.opacities[index], self.colors[index],
        )


def resample_depth(depth: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """
    Resample a depth map (0 = invalid) to `shape`

    Integer downsampling averages consistent blocks and keeps the nearest surface
    across depth edges; everything else is bilinear with invalid pixels propagated.
    """
    depth = np.asarray(depth, dtype=np.float64)
    height, width = shape
    if depth.shape == (height, width):
        return depth.copy()

    valid = depth > 0
    stride = depth.shape[0] // height
    if stride > 1 and depth.shape[0] // stride == height and depth.shape[1] // stride == width:
        blocks = crop_to_multiple(depth, stride).reshape(height, stride, width, stride)
        block_valid = blocks > 0
        any_valid = block_valid.any(axis=(1, 3))
        nearest = np.where(block_valid, blocks, np.inf).min(axis=(1, 3))
        farthest = np.where(block_valid, blocks, 0.0).max(axis=(1, 3))
        consistent = block_valid.all(axis=(1, 3)) & (farthest <= nearest * EDGE_RATIO)
        out = np.where(consistent, blocks.mean(axis=(1, 3)), np.where(any_valid, nearest, 0.0))
        return out

    size = (width, height)
    smooth = cv2.resize(np.where(valid, depth, 0.0), size, interpolation=cv2.INTER_LINEAR)
    coverage = cv2.resize(valid.astype(np.float64), size, interpolation=cv2.INTER_LINEAR)
    return np.where(coverage > 1.0 - 1e-6, smooth, 0.0)


def resample_map(values: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear (up) or area (down) resampling of a dense map"""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[:2] == tuple(shape):
        return values.copy()
    interpolation = cv2.INTER_AREA if values.shape[0] > shape[0] else cv2.INTER_LINEAR
    return cv2.resize(values, (shape[1], shape[0]), interpolation=interpolation)


def lift_view(
    frame: CameraFrame,
    depth: np.ndarray,
    conf: np.ndarray,
    stride: int = 2,
    initial_opacity: float = 0.9,
) -> LocalTriplets:
    """
    Unproject one view into pixel-aligned triplets at 1/stride resolution

    There is no feature-map argument: triplet features are recomputed from the frame
    itself (area-downsampled colour, the initial opacity logit and the confidence
    logit), so nothing from the matching stage is carried into the Gaussians.

    Args:
        frame: Source frame (image + camera)
        depth: Depth map at any resolution (0 = invalid)
        conf: Confidence map, same role as the triplet weight
        stride: Lift stride (1, 2 or 4)
        initial_opacity: Opacity encoded in the initial opacity logit

    Returns:
        One triplet per lift pixel with valid depth
    """
    if stride not in (1, 2, 4):
        raise GeometryError(f"Lift stride must be 1, 2 or 4, got {stride}")

    camera = frame.camera.scaled(stride)
    height, width = camera.shape
    depth_s = resample_depth(depth, (height, width))
    conf_s = resample_map(conf, (height, width))
    colors = downsample(frame.image, stride)

    valid = depth_s.ravel() > 0
    if not valid.any():
        raise GeometryError(f"View {frame.index}: no pixel has a valid depth")

    u, v = pixel_grid(height, width)
    pixel_index = np.flatnonzero(valid)
    depths = depth_s.ravel()[valid]
    weights = np.clip(conf_s.ravel()[valid], *WEIGHT_RANGE)
    centers = unproject_pixels(camera.intrinsics, camera.pose, u[valid], v[valid], depths)

    features = np.zeros((len(depths), FEATURE_DIM))
    features[:, COLOR] = colors.reshape(-1, 3)[valid]
    features[:, OPACITY_LOGIT] = logit(initial_opacity)
    features[:, CONFIDENCE_LOGIT] = logit(weights)

    logger.debug(f"Lifted view {frame.index}: {len(depths)} triplets at stride {stride}")
    return LocalTriplets(
        view_id=frame.index,
        camera=camera,
        centers=centers,
        weights=weights,
        features=features,
        pixel_index=pixel_index,
        depths=depths,
    )


def decode_gaussians(g: GlobalTriplets, base_scale_px: float = 1.5) -> GaussianPrimitives:
    """
    Turn fused triplets into renderable primitives

    Scale follows the pixel footprint at lift time (base_scale_px * depth / focal),
    opacity is sigmoid(logit) times the floater-removal factor beta.

    Args:
        g: Global triplets (M >= 1)
        base_scale_px: Splat radius in lift pixels

    Returns:
        GaussianPrimitives with identity rotations and isotropic scales
    """
    if g.size == 0:
        raise GeometryError("Cannot decode an empty triplet set")
    seed = g.features[:, LOG_SCALE]
    s_iso = np.clip(base_scale_px * g.depths / g.focals * np.exp(seed), *SCALE_RANGE)
    opacity_logit = np.clip(g.features[:, OPACITY_LOGIT], -OPACITY_LOGIT_CAP, OPACITY_LOGIT_CAP)
    opacities = np.clip(expit(opacity_logit) * g.betas, *ALPHA_RANGE)

    quaternions = np.zeros((g.size, 4))
    quaternions[:, 0] = 1.0
    return GaussianPrimitives(
        means=g.centers.copy(),
        quaternions=quaternions,
        scales=np.repeat(s_iso[:, None], 3, axis=1),
        opacities=opacities,
        colors=np.clip(g.features[:, COLOR], 0.0, 1.0),
    )


def merge_unfused(global_triplets: GlobalTriplets, local_unaligned: LocalTriplets) -> GlobalTriplets:
    """Append local triplets that found no partner (beta starts at 1)"""
    if local_unaligned.size == 0:
        return global_triplets
    return global_triplets.concatenate(GlobalTriplets.from_local(local_unaligned))
