"""
Renderer
CPU tile-based forward splatting of Gaussian primitives into colour, depth and
accumulated-alpha images.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from src.errors import GeometryError
from src.gaussian_map import GaussianPrimitives
from src.geometry import Camera, covariance_matrices, perspective_jacobian, project_covariance

logger = logging.getLogger(__name__)

ALPHA_CLAMP = 0.99
MIN_TRANSMITTANCE = 1e-4
RADIUS_SIGMAS = 3.0
TILE_SIZES = (8, 16, 32)


@dataclass
class RenderedImage:
    """Rasterizer output"""
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) metres, alpha-weighted, 0 where nothing was hit
    alpha: np.ndarray  # (H, W) accumulated opacity

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


@dataclass
class SplatBatch:
    """Image-space records of the visible Gaussians, sorted front to back"""
    index: np.ndarray      # (S,) index into the source primitives
    means2d: np.ndarray    # (S, 2) pixel coordinates
    cov2d: np.ndarray      # (S, 2, 2)
    conics: np.ndarray     # (S, 3) upper triangle (a, b, c) of the inverse covariance
    depths: np.ndarray     # (S,) camera-frame z
    opacities: np.ndarray  # (S,)
    colors: np.ndarray     # (S, 3)
    radii: np.ndarray      # (S,) pixels

    @property
    def size(self) -> int:
        return len(self.index)


@dataclass
class TileBlend:
    """Per-pixel, per-splat blending terms of one tile (pixels x splats)"""
    ids: np.ndarray            # (G,) rows of the SplatBatch touching the tile
    dx: np.ndarray             # (P, G)
    dy: np.ndarray             # (P, G)
    gauss: np.ndarray          # (P, G) exp(power)
    alpha: np.ndarray          # (P, G) effective alpha after clamp and footprint
    clamped: np.ndarray        # (P, G) alpha hit ALPHA_CLAMP
    transmittance: np.ndarray  # (P, G) exclusive product of (1 - alpha)
    weights: np.ndarray        # (P, G) alpha * transmittance, 0 once the ray terminated


def prepare_splats(prims: GaussianPrimitives, camera: Camera, near_plane: float = 0.05) -> SplatBatch:
    """
    Project primitives into a camera and cull invisible ones

    Args:
        prims: Gaussian primitives
        camera: Target camera
        near_plane: Gaussians with camera z below this are dropped

    Returns:
        SplatBatch sorted by depth (stable, so ties keep input order)
    """
    K, pose = camera.intrinsics, camera.pose
    x_cam = pose.apply(prims.means) if prims.size else np.zeros((0, 3))
    visible = (x_cam[:, 2] >= near_plane) & (prims.opacities > 0)
    index = np.flatnonzero(visible)
    x_cam = x_cam[index]

    if len(index):
        jac = perspective_jacobian(K, x_cam)
        cov3d = covariance_matrices(prims.quaternions[index], prims.scales[index])
        cov2d = project_covariance(cov3d, pose, jac)
    else:
        cov2d = np.zeros((0, 2, 2))
    means2d = np.stack([K.fx * x_cam[:, 0] / x_cam[:, 2] + K.cx, K.fy * x_cam[:, 1] / x_cam[:, 2] + K.cy], axis=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lambda_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = RADIUS_SIGMAS * np.sqrt(lambda_max)
    conics = np.stack([c / det, -b / det, a / det], axis=-1)

    on_image = (
        (means2d[:, 0] + radii >= 0) & (means2d[:, 0] - radii <= K.width - 1)
        & (means2d[:, 1] + radii >= 0) & (means2d[:, 1] - radii <= K.height - 1)
    )
    keep = np.flatnonzero(on_image)
    order = keep[np.argsort(x_cam[keep, 2], kind="stable")]
    return SplatBatch(
        index=index[order],
        means2d=means2d[order],
        cov2d=cov2d[order],
        conics=conics[order],
        depths=x_cam[order, 2],
        opacities=prims.opacities[index][order],
        colors=prims.colors[index][order],
        radii=radii[order],
    )


def iter_tiles(height: int, width: int, tile_size: int) -> Iterator[Tuple[int, int, int, int]]:
    """Yield (y0, y1, x0, x1) pixel ranges in row-major tile order"""
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            yield y0, min(y0 + tile_size, height), x0, min(x0 + tile_size, width)


def tile_splats(splats: SplatBatch, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
    """Front-to-back rows of the splats whose bounding square touches the tile"""
    u, v, r = splats.means2d[:, 0], splats.means2d[:, 1], splats.radii
    touches = (u + r >= x0) & (u - r <= x1 - 1) & (v + r >= y0) & (v - r <= y1 - 1)
    return np.flatnonzero(touches)


def blend_tile(splats: SplatBatch, ids: np.ndarray, px: np.ndarray, py: np.ndarray) -> TileBlend:
    """
    Front-to-back alpha compositing terms for a set of pixels

    Args:
        splats: Sorted splat batch
        ids: Splat rows in front-to-back order
        px, py: (P,) pixel coordinates

    Returns:
        TileBlend with (P, G) matrices
    """
    u = splats.means2d[ids, 0]
    v = splats.means2d[ids, 1]
    conic = splats.conics[ids]
    dx = px[:, None] - u[None, :]
    dy = py[:, None] - v[None, :]
    power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
    gauss = np.exp(np.minimum(power, 0.0))

    radius = splats.radii[ids]
    footprint = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    raw = splats.opacities[ids] * gauss
    clamped = footprint & (raw >= ALPHA_CLAMP)
    alpha = np.where(footprint, np.minimum(raw, ALPHA_CLAMP), 0.0)

    transmittance = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        transmittance[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    weights = np.where(transmittance >= MIN_TRANSMITTANCE, alpha * transmittance, 0.0)
    return TileBlend(ids, dx, dy, gauss, alpha, clamped, transmittance, weights)


def render(
    prims: GaussianPrimitives,
    camera: Camera,
    tile_size: int = 16,
    near_plane: float = 0.05,
) -> RenderedImage:
    """
    Rasterize primitives into colour, depth and alpha

    Args:
        prims: Gaussian primitives
        camera: Target camera
        tile_size: Tile edge in pixels (8, 16 or 32)
        near_plane: Near clipping depth (m)

    Returns:
        RenderedImage on a black background
    """
    if tile_size not in TILE_SIZES:
        raise GeometryError(f"tile_size must be one of {TILE_SIZES}, got {tile_size}")
    height, width = camera.shape
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    alpha = np.zeros((height, width))

    splats = prepare_splats(prims, camera, near_plane)
    logger.debug(f"Rendering {splats.size}/{prims.size} visible splats at {width}x{height}")
    if splats.size == 0:
        return RenderedImage(color, depth, alpha)

    for y0, y1, x0, x1 in iter_tiles(height, width, tile_size):
        ids = tile_splats(splats, y0, y1, x0, x1)
        if len(ids) == 0:
            continue
        py, px = np.mgrid[y0:y1, x0:x1]
        blend = blend_tile(splats, ids, px.ravel().astype(np.float64), py.ravel().astype(np.float64))
        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = (blend.weights @ splats.colors[ids]).reshape(shape + (3,))
        depth[y0:y1, x0:x1] = (blend.weights @ splats.depths[ids]).reshape(shape)
        alpha[y0:y1, x0:x1] = blend.weights.sum(axis=1).reshape(shape)

    depth[alpha < MIN_TRANSMITTANCE] = 0.0
    return RenderedImage(color, depth, alpha)
