"""
Pixel-wise Triplet Fusion
Incrementally aligns global triplets with each new view's local triplets and
merges validated pairs by weight.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.errors import DataError, GeometryError
from src.gaussian_map import GlobalTriplets, LocalTriplets, merge_unfused
from src.geometry import Camera, project_points
from src.utils import progress_enabled

logger = logging.getLogger(__name__)


@dataclass
class ProjectionBuffer:
    """Global projections binned per lift pixel, each bin sorted by (depth, index)"""
    grid_shape: Tuple[int, int]
    index: np.ndarray    # (B,) global indices
    pixel: np.ndarray    # (B,) flat pixel per entry
    depth: np.ndarray    # (B,) projected depth per entry
    offsets: np.ndarray  # (h * w + 1,) CSR offsets into the arrays above

    @property
    def count(self) -> int:
        return len(self.index)

    def bin(self, pixel: int) -> Tuple[np.ndarray, np.ndarray]:
        """Global indices and depths projecting into one pixel"""
        start, stop = self.offsets[pixel], self.offsets[pixel + 1]
        return self.index[start:stop], self.depth[start:stop]

    def nearest(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Per-pixel argmin of projected depth

        Returns:
            (h * w,) global index (-1 for empty bins) and its depth (inf for empty bins)
        """
        n_pixels = self.grid_shape[0] * self.grid_shape[1]
        nearest_index = np.full(n_pixels, -1, dtype=np.int64)
        nearest_depth = np.full(n_pixels, np.inf)
        nonempty = self.offsets[1:] > self.offsets[:-1]
        first = self.offsets[:-1][nonempty]
        nearest_index[nonempty] = self.index[first]
        nearest_depth[nonempty] = self.depth[first]
        return nearest_index, nearest_depth


@dataclass
class CorrespondenceSet:
    """Validated (local, global) pairs"""
    local_index: np.ndarray
    global_index: np.ndarray
    delta: float

    @property
    def size(self) -> int:
        return len(self.local_index)


@dataclass
class FusionStats:
    """Per-view record of the incremental fusion"""
    view_id: int
    lifted: int
    pairs: int
    appended: int
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def bin_projections(global_triplets: GlobalTriplets, camera: Camera) -> ProjectionBuffer:
    """
    Project global centres into a camera and bin them by rounded pixel

    Args:
        global_triplets: Current global set
        camera: Camera at lift resolution

    Returns:
        ProjectionBuffer (empty if nothing lands in front of the camera and in bounds)
    """
    height, width = camera.shape
    if global_triplets.size == 0:
        return ProjectionBuffer((height, width), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                np.zeros(0), np.zeros(height * width + 1, dtype=np.int64))

    uv, depth, in_front = project_points(camera.intrinsics, camera.pose, global_triplets.centers)
    keep = in_front.copy()
    x = np.zeros(len(depth), dtype=np.int64)
    y = np.zeros(len(depth), dtype=np.int64)
    x[keep] = round_half_up(uv[keep, 0]).astype(np.int64)
    y[keep] = round_half_up(uv[keep, 1]).astype(np.int64)
    keep &= (x >= 0) & (x < width) & (y >= 0) & (y < height)

    index = np.flatnonzero(keep)
    pixel = y[keep] * width + x[keep]
    depth = depth[keep]
    order = np.lexsort((index, depth, pixel))
    index, pixel, depth = index[order], pixel[order], depth[order]

    offsets = np.zeros(height * width + 1, dtype=np.int64)
    np.cumsum(np.bincount(pixel, minlength=height * width), out=offsets[1:])
    return ProjectionBuffer((height, width), index, pixel, depth, offsets)


def pixel_align(
    buffer: ProjectionBuffer,
    local: LocalTriplets,
    delta: float,
    broader: bool = True,
) -> CorrespondenceSet:
    """
    Pair each local triplet with the nearest global projection in its pixel

    A pair is valid when d_l - d_g > -delta (broader rule) or |d_l - d_g| < delta
    (symmetric rule). Scan order is row-major; a global claimed earlier is not reused.

    Args:
        buffer: Binned global projections for this view
        local: Local triplets of this view
        delta: Depth threshold (m)
        broader: Use the one-sided rule that also absorbs foreground globals

    Returns:
        CorrespondenceSet
    """
    if delta <= 0:
        raise GeometryError(f"Fusion threshold must be positive, got {delta}")
    nearest_index, nearest_depth = buffer.nearest()

    order = np.argsort(local.pixel_index, kind="stable")
    pixels = local.pixel_index[order]
    candidate = nearest_index[pixels]
    difference = local.depths[order] - nearest_depth[pixels]
    if broader:
        valid = difference > -delta
    else:
        valid = np.abs(difference) < delta
    valid &= candidate >= 0

    local_index = order[valid]
    global_index = candidate[valid]
    _, first = np.unique(global_index, return_index=True)
    first.sort()
    return CorrespondenceSet(local_index[first], global_index[first], delta)


def fuse_features(f_l: np.ndarray, f_g: np.ndarray, w_l, w_g) -> np.ndarray:
    """
    Weight-proportional convex blend of triplet features

    Args:
        f_l, f_g: (F,) or (P, F) feature vectors
        w_l, w_g: Scalar or (P,) positive weights

    Returns:
        (w_l f_l + w_g f_g) / (w_l + w_g)
    """
    w_l = np.asarray(w_l, dtype=np.float64)
    w_g = np.asarray(w_g, dtype=np.float64)
    if np.any(w_l <= 0) or np.any(w_g <= 0):
        raise GeometryError("Fusion weights must be positive")
    if np.ndim(f_l) > np.ndim(w_l):
        w_l, w_g = w_l[..., None], w_g[..., None]
    return (w_l * f_l + w_g * f_g) / (w_l + w_g)


def fuse_pairs(
    global_triplets: GlobalTriplets,
    local: LocalTriplets,
    pairs: CorrespondenceSet,
) -> GlobalTriplets:
    """
    Merge paired triplets and append the unpaired local ones

    Args:
        global_triplets: Global set before this view
        local: Local triplets of this view
        pairs: Validated correspondences

    Returns:
        Updated global set
    """
    m = pairs.global_index
    i = pairs.local_index
    if len(np.unique(m)) != len(m):
        raise GeometryError("Correspondences reference the same global triplet twice")

    out = global_triplets.copy()
    w_l = local.weights[i]
    w_g = out.weights[m]
    total = w_l + w_g

    out.centers[m] = (w_l[:, None] * local.centers[i] + w_g[:, None] * out.centers[m]) / total[:, None]
    out.features[m] = fuse_features(local.features[i], out.features[m], w_l, w_g)
    out.depths[m] = (w_l * local.depths[i] + w_g * out.depths[m]) / total
    lift_focal = local.camera.intrinsics.mean_focal
    out.focals[m] = (w_l * lift_focal + w_g * out.focals[m]) / total
    out.weights[m] = total

    unpaired = np.ones(local.size, dtype=bool)
    unpaired[i] = False
    return merge_unfused(out, local.subset(unpaired))


def run_ptf(
    views: Sequence[LocalTriplets],
    delta: float = 0.1,
    enable_fusion: bool = True,
    broader: bool = True,
) -> Tuple[GlobalTriplets, List[FusionStats]]:
    """
    Sequential fusion over views in input order

    Args:
        views: Lifted triplets per view
        delta: Fusion depth threshold (m)
        enable_fusion: If False every view is simply appended
        broader: One-sided (True) or symmetric (False) pairing rule

    Returns:
        Global triplets and per-view statistics
    """
    if not views:
        raise GeometryError("Fusion needs at least one view")

    global_triplets = GlobalTriplets()
    stats: List[FusionStats] = []
    for local in tqdm(views, desc="Fusing views", disable=not progress_enabled()):
        try:
            if enable_fusion and global_triplets.size > 0:
                buffer = bin_projections(global_triplets, local.camera)
                pairs = pixel_align(buffer, local, delta, broader)
                global_triplets = fuse_pairs(global_triplets, local, pairs)
                n_pairs = pairs.size
            else:
                global_triplets = merge_unfused(global_triplets, local)
                n_pairs = 0
        except GeometryError as e:
            raise DataError(str(e), frame_index=local.view_id) from e

        record = FusionStats(
            view_id=local.view_id,
            lifted=local.size,
            pairs=n_pairs,
            appended=local.size - n_pairs,
            total=global_triplets.size,
        )
        stats.append(record)
        logger.info(
            f"View {record.view_id}: lifted {record.lifted}, fused {record.pairs}, "
            f"appended {record.appended}, total {record.total}"
        )

    return global_triplets, stats
