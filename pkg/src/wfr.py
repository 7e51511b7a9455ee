"""
Weighted Floater Removal
Second pass over the input views that finds global triplets floating in front of
each view's predicted surface and scales their opacity down by accumulated evidence.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.errors import DataError, GeometryError
from src.gaussian_map import GlobalTriplets, LocalTriplets
from src.ptf import ProjectionBuffer, bin_projections
from src.utils import progress_enabled

logger = logging.getLogger(__name__)

STRATEGIES = ("neighbor_accumulate", "no_accumulate", "uniform", "direct_removal")


@dataclass
class FloaterIndication:
    """Pixels whose nearest global projection sits more than delta in front of the local depth"""
    pixel: np.ndarray          # (K,) flat lift-grid pixel, row-major
    global_index: np.ndarray   # (K,) m_i
    global_depth: np.ndarray   # (K,) d_g(m_i)
    local_depth: np.ndarray    # (K,) d_l(i)

    @property
    def size(self) -> int:
        return len(self.pixel)


@dataclass
class RemovalStats:
    """Per-view record of the floater pass"""
    view_id: int
    indicated: int
    reduced: int
    removed: int
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def indicate_floaters(buffer: ProjectionBuffer, local_depth: np.ndarray, delta: float) -> FloaterIndication:
    """
    Detect pixels where the closest projected global lies in front of the local surface

    Args:
        buffer: Global projections binned in this view
        local_depth: (h, w) predicted depth at lift resolution (0 = no prediction)
        delta: Depth threshold (m)

    Returns:
        FloaterIndication in row-major pixel order
    """
    if delta <= 0:
        raise GeometryError(f"Floater threshold must be positive, got {delta}")
    if tuple(local_depth.shape) != tuple(buffer.grid_shape):
        raise GeometryError(f"Depth map {local_depth.shape} does not match grid {buffer.grid_shape}")

    nearest_index, nearest_depth = buffer.nearest()
    d_l = np.asarray(local_depth, dtype=np.float64).ravel()
    hit = (nearest_index >= 0) & (d_l > 0)
    hit[hit] = d_l[hit] - nearest_depth[hit] > delta
    pixel = np.flatnonzero(hit)
    return FloaterIndication(pixel, nearest_index[pixel], nearest_depth[pixel], d_l[pixel])


def neighbor_weights(bin_depths: np.ndarray, d_ref: float, weights: np.ndarray, delta: float) -> float:
    """
    Sum of weights whose depth lies within delta of d_ref in one pixel bin

    Args:
        bin_depths: Projected depths of the bin entries
        d_ref: Reference depth (m)
        weights: Global weights of the same entries
        delta: Window half-width (m)

    Returns:
        Accumulated weight (0 for an empty window)
    """
    if delta <= 0:
        raise GeometryError(f"Window must be positive, got {delta}")
    inside = np.abs(d_ref - np.asarray(bin_depths)) < delta
    return float(np.sum(np.asarray(weights)[inside]))


def accumulate_neighbor_weights(
    buffer: ProjectionBuffer,
    indication: FloaterIndication,
    weights: np.ndarray,
    delta: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    neighbor_weights for every indication at once

    Returns:
        (K,) evidence for the floater (window around d_g) and (K,) evidence for the
        surface (window around d_l), both summed over global weights in the pixel bin
    """
    n_pixels = buffer.grid_shape[0] * buffer.grid_shape[1]
    row = np.full(n_pixels, -1, dtype=np.int64)
    row[indication.pixel] = np.arange(indication.size)

    entry_row = row[buffer.pixel]
    used = entry_row >= 0
    r = entry_row[used]
    depth = buffer.depth[used]
    w = weights[buffer.index[used]]

    near_global = np.abs(indication.global_depth[r] - depth) < delta
    near_local = np.abs(indication.local_depth[r] - depth) < delta
    w_global = np.bincount(r[near_global], weights=w[near_global], minlength=indication.size)
    w_local = np.bincount(r[near_local], weights=w[near_local], minlength=indication.size)
    return w_global, w_local


def reduction_factors(w_global: np.ndarray, w_local: np.ndarray, epsilon_floor: float = 0.01) -> np.ndarray:
    """
    Opacity multipliers w_g / (w_g + w_l)

    An isolated floater (w_g = 0) gets epsilon_floor; without surface evidence
    (w_l = 0) the factor is 1.
    """
    w_global = np.asarray(w_global, dtype=np.float64)
    w_local = np.asarray(w_local, dtype=np.float64)
    total = w_global + w_local
    ratio = np.divide(w_global, total, out=np.ones_like(total), where=total > 0)
    return np.select([w_local <= 0, w_global <= 0], [1.0, epsilon_floor], default=ratio)


def apply_opacity_reduction(
    global_triplets: GlobalTriplets,
    indication: FloaterIndication,
    w_global: np.ndarray,
    w_local: np.ndarray,
    epsilon_floor: float = 0.01,
) -> int:
    """
    Multiply beta of every indicated global by its reduction factor, in place

    Several pixels may indicate the same global; all their factors are applied.

    Returns:
        Number of indications whose factor was below 1
    """
    factors = reduction_factors(w_global, w_local, epsilon_floor)
    np.multiply.at(global_triplets.betas, indication.global_index, factors)
    return int(np.count_nonzero(factors < 1.0))


def run_wfr(
    global_triplets: GlobalTriplets,
    views: Sequence[LocalTriplets],
    delta: float = 0.1,
    strategy: str = "neighbor_accumulate",
    epsilon_floor: float = 0.01,
) -> Tuple[GlobalTriplets, List[RemovalStats]]:
    """
    Sequential floater pass over the views in input order

    Args:
        global_triplets: Output of run_ptf
        views: Lifted triplets per view (their depth and weight maps are the local evidence)
        delta: Floater threshold (m)
        strategy: neighbor_accumulate, no_accumulate, uniform or direct_removal
        epsilon_floor: Factor used for floaters without any supporting neighbours

    Returns:
        Adjusted copy of the global triplets and per-view statistics
    """
    if strategy not in STRATEGIES:
        raise GeometryError(f"Unknown floater strategy '{strategy}', expected one of {STRATEGIES}")

    result = global_triplets.copy()
    stats: List[RemovalStats] = []
    for local in tqdm(views, desc="Removing floaters", disable=not progress_enabled()):
        try:
            buffer = bin_projections(result, local.camera)
            indication = indicate_floaters(buffer, local.depth_map(), delta)
            reduced = removed = 0

            if indication.size and strategy == "direct_removal":
                keep = np.ones(result.size, dtype=bool)
                keep[indication.global_index] = False
                removed = int(result.size - keep.sum())
                result = result.select(keep)
            elif indication.size:
                if strategy == "neighbor_accumulate":
                    w_global, w_local = accumulate_neighbor_weights(buffer, indication, result.weights, delta)
                elif strategy == "no_accumulate":
                    w_global = result.weights[indication.global_index]
                    w_local = local.weight_map().ravel()[indication.pixel]
                else:
                    w_global = np.ones(indication.size)
                    w_local = np.ones(indication.size)
                reduced = apply_opacity_reduction(result, indication, w_global, w_local, epsilon_floor)
        except GeometryError as e:
            raise DataError(str(e), frame_index=local.view_id) from e

        record = RemovalStats(local.view_id, indication.size, reduced, removed, result.size)
        stats.append(record)
        logger.info(
            f"View {record.view_id}: {record.indicated} floater indications, "
            f"{record.reduced} reduced, {record.removed} removed"
        )

    return result, stats
