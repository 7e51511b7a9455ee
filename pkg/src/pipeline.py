"""
Reconstruction Pipeline
Chains depth estimation, lifting, triplet fusion, floater removal and decoding
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config import PipelineConfig
from src.errors import DataError, GeometryError
from src.gaussian_map import GaussianPrimitives, GlobalTriplets, LocalTriplets, decode_gaussians, lift_view
from src.geometry import CameraFrame, compose_transform
from src.matching import (
    FEATURE_SCALE,
    aggregate_cost_volume,
    build_cost_volume,
    compute_matching_features,
    depth_planes,
    select_nearby_views,
    softargmax_depth,
)
from src.ptf import FusionStats, run_ptf
from src.utils import Timer
from src.wfr import RemovalStats, run_wfr

logger = logging.getLogger(__name__)


@dataclass
class DepthEstimate:
    """Per-view depth and confidence (any resolution; lifting resamples)"""
    view_id: int
    depth: np.ndarray
    confidence: np.ndarray

    @property
    def coverage(self) -> float:
        return float((self.depth > 0).mean())


@dataclass
class ReconstructionResult:
    primitives: GaussianPrimitives
    global_triplets: GlobalTriplets
    local_triplets: List[LocalTriplets]
    fusion_stats: List[FusionStats]
    removal_stats: List[RemovalStats]
    timings: Dict[str, float] = field(default_factory=dict)

    def predicted_depths(self) -> Dict[int, np.ndarray]:
        """Lift-resolution depth map of every lifted view"""
        return {local.view_id: local.depth_map() for local in self.local_triplets}

    def stats(self) -> dict:
        """Gaussian counts and per-view fusion and removal records (no wall-clock values)"""
        total_lifted = int(sum(local.size for local in self.local_triplets))
        removal = {record.view_id: record for record in self.removal_stats}
        views = []
        for record in self.fusion_stats:
            entry = record.to_dict()
            if record.view_id in removal:
                entry.update({
                    "floater_indications": removal[record.view_id].indicated,
                    "opacity_reductions": removal[record.view_id].reduced,
                    "removed": removal[record.view_id].removed,
                })
            views.append(entry)
        final = self.primitives.size
        return {
            "views": views,
            "total_lifted": total_lifted,
            "num_gaussians": final,
            "reduction_ratio": final / total_lifted if total_lifted else 0.0,
            "floater_indications": int(sum(r.indicated for r in self.removal_stats)),
            "opacity_reductions": int(sum(r.reduced for r in self.removal_stats)),
            "removed": int(sum(r.removed for r in self.removal_stats)),
        }


class ReconstructionEngine:
    """Feed-forward reconstruction of posed views into Gaussian primitives"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        """
        Initialize engine

        Args:
            config: Pipeline configuration (defaults if omitted)
        """
        self.config = config or PipelineConfig()
        logger.info(
            f"Engine ready: stride {self.config.lifting.stride}, "
            f"fusion={'on' if self.config.ptf.enable_fusion else 'off'} "
            f"(broader={self.config.ptf.broader_fusion}), "
            f"floater removal={self.config.wfr.wfr_strategy if self.config.wfr.enable_wfr else 'off'}"
        )

    def estimate_depth(self, frames: Sequence[CameraFrame], t: int, features=None) -> DepthEstimate:
        """
        Plane-sweep depth for view t against its nearest views

        Args:
            frames: Input frames (shared intrinsics)
            t: Position of the reference view in `frames`
            features: Optional precomputed FeatureMaps, one per frame

        Returns:
            Quarter-resolution DepthEstimate
        """
        cfg = self.config.matching
        if len(frames) < 2:
            raise GeometryError("Plane-sweep depth needs at least two input views")
        features = features or [compute_matching_features(f.image) for f in frames]
        num_neighbors = min(cfg.num_neighbors, len(frames) - 1)
        poses = [f.camera.pose for f in frames]
        neighbors = select_nearby_views(poses, t, num_neighbors, cfg.rotation_weight)

        K = frames[t].camera.intrinsics.scaled(FEATURE_SCALE)
        pairs = [(features[i], compose_transform(poses[i], poses[t])) for i in neighbors]
        planes = depth_planes(cfg.d_near, cfg.d_far, cfg.num_planes, cfg.plane_spacing)
        volume = aggregate_cost_volume(build_cost_volume(features[t], pairs, K, planes), cfg.aggregation_kernel)
        depth, confidence = softargmax_depth(volume, cfg.temperature)

        if cfg.mask_unmatched:
            unmatched = ~volume.matched
            depth = np.where(unmatched, 0.0, depth)
            if unmatched.any():
                logger.debug(f"View {frames[t].index}: {int(unmatched.sum())} unmatched pixels masked")
        return DepthEstimate(frames[t].index, depth, confidence)

    def ground_truth_depth(self, frame: CameraFrame) -> DepthEstimate:
        """Provided depth with constant confidence"""
        if frame.depth is None:
            raise DataError("no depth map available for --use-gt-depth", frame.index)
        confidence = np.full(frame.depth.shape, self.config.lifting.gt_confidence)
        return DepthEstimate(frame.index, frame.depth, confidence)

    def estimate_depths(self, frames: Sequence[CameraFrame]) -> List[DepthEstimate]:
        """Depth for every frame, in frame order, optionally on a thread pool"""
        if self.config.lifting.use_gt_depth:
            return [self.ground_truth_depth(frame) for frame in frames]

        features = [compute_matching_features(f.image) for f in frames]
        shapes = {f.camera.intrinsics for f in frames}
        if len(shapes) > 1:
            raise DataError("plane-sweep matching expects all input views to share intrinsics")

        def one(t: int) -> DepthEstimate:
            try:
                return self.estimate_depth(frames, t, features)
            except GeometryError as e:
                raise DataError(str(e), frame_index=frames[t].index) from e

        threads = self.config.runtime.threads
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(one, range(len(frames))))
        return [one(t) for t in range(len(frames))]

    def lift(self, frames: Sequence[CameraFrame], estimates: Sequence[DepthEstimate]) -> List[LocalTriplets]:
        cfg = self.config.lifting
        locals_ = []
        for frame, estimate in zip(frames, estimates):
            try:
                locals_.append(lift_view(frame, estimate.depth, estimate.confidence, cfg.stride, cfg.initial_opacity))
            except GeometryError as e:
                raise DataError(str(e), frame_index=frame.index) from e
        return locals_

    def reconstruct(self, frames: Sequence[CameraFrame]) -> ReconstructionResult:
        """
        Run the full feed-forward pipeline on the 'input' frames

        Args:
            frames: All loaded frames; non-input splits are ignored here

        Returns:
            ReconstructionResult with primitives, intermediate triplets, stats and timings
        """
        inputs = [f for f in frames if f.split == "input"]
        if not inputs:
            raise DataError("manifest contains no input views")
        logger.info(f"Reconstructing from {len(inputs)} input views")
        timings: Dict[str, float] = {}

        with Timer("depth estimation") as timer:
            estimates = self.estimate_depths(inputs)
        timings["depth"] = timer.elapsed

        with Timer("lifting") as timer:
            local_triplets = self.lift(inputs, estimates)
        timings["lift"] = timer.elapsed

        ptf = self.config.ptf
        with Timer("triplet fusion") as timer:
            global_triplets, fusion_stats = run_ptf(local_triplets, ptf.ptf_delta, ptf.enable_fusion, ptf.broader_fusion)
        timings["ptf"] = timer.elapsed

        removal_stats: List[RemovalStats] = []
        wfr = self.config.wfr
        if wfr.enable_wfr:
            with Timer("floater removal") as timer:
                global_triplets, removal_stats = run_wfr(
                    global_triplets, local_triplets, wfr.wfr_delta, wfr.wfr_strategy, wfr.wfr_epsilon_floor
                )
            timings["wfr"] = timer.elapsed

        with Timer("decoding") as timer:
            primitives = decode_gaussians(global_triplets, self.config.lifting.base_scale_px)
        timings["decode"] = timer.elapsed
        timings["total"] = float(sum(timings.values()))

        logger.info(
            f"Reconstruction done: {sum(l.size for l in local_triplets)} lifted -> {primitives.size} Gaussians"
        )
        return ReconstructionResult(primitives, global_triplets, local_triplets, fusion_stats, removal_stats, timings)


def reconstruct_frames(frames: Sequence[CameraFrame], config: Optional[PipelineConfig] = None) -> ReconstructionResult:
    """Convenience wrapper around ReconstructionEngine.reconstruct"""
    return ReconstructionEngine(config).reconstruct(frames)
