"""
Tests for the reconstruction pipeline
"""

from dataclasses import replace

import numpy as np
import pytest

from conftest import make_frame
from src.config import PipelineConfig
from src.errors import DataError
from src.geometry import Camera, Intrinsics, Pose
from src.matching import FEATURE_SCALE, downsample, local_variance
from src.metrics import depth_metrics, psnr
from src.pipeline import ReconstructionEngine, reconstruct_frames
from src.renderer import render
from src.synthetic import SyntheticScene, Trajectory, generate_synthetic, plant_floaters

GT = {"lifting.use_gt_depth": True}


@pytest.fixture(scope="module")
def floater_scene():
    """Six orbit views; a sphere on the last view's axis that only the last view sees"""
    desc = SyntheticScene(trajectory=Trajectory(num_views=6), width=64, height=48, focal=48.0, seed=11)
    last = desc.trajectory.num_views - 1
    desc = plant_floaters(desc, [last], offset=0.5, radius=0.15, visible_views=[last])
    return desc.floaters[0], generate_synthetic(desc).frames


def _near_floater(prims, sphere):
    distance = np.linalg.norm(prims.means - np.asarray(sphere.center), axis=1)
    return distance < sphere.radius + 0.05


class TestDepthEstimation:
    """Plane-sweep depth inside the engine"""

    def test_quarter_resolution_within_range(self, small_room):
        _, frames = small_room
        engine = ReconstructionEngine()
        estimate = engine.estimate_depth(frames, 0)
        assert estimate.depth.shape == (48 // FEATURE_SCALE, 64 // FEATURE_SCALE)
        valid = estimate.depth[estimate.depth > 0]
        assert valid.size > 0
        cfg = engine.config.matching
        assert valid.min() >= cfg.d_near and valid.max() <= cfg.d_far
        assert np.all((estimate.confidence > 0) & (estimate.confidence <= 1))

    def test_textured_pixels_accurate(self):
        """Inner views of a four-view track: every pixel is seen by one of the two neighbours"""
        desc = SyntheticScene(
            trajectory=Trajectory(kind="linear", num_views=4), width=320, height=240, focal=240.0, seed=7
        )
        frames = generate_synthetic(desc).frames
        engine = ReconstructionEngine()
        pred, gt = [], []
        for t in (1, 2):
            estimate = engine.estimate_depth(frames, t)
            reference = downsample(frames[t].depth, FEATURE_SCALE)
            textured = (local_variance(frames[t].image) > 1e-4) & (estimate.depth > 0) & (reference > 0)
            pred.append(estimate.depth[textured])
            gt.append(reference[textured])
        pred, gt = np.concatenate(pred), np.concatenate(gt)
        assert pred.size > 2000
        assert depth_metrics(pred, gt)["delta_1.25"] >= 0.9

    def test_threads_do_not_change_results(self, small_room):
        _, frames = small_room
        serial = ReconstructionEngine().estimate_depths(frames)
        parallel = ReconstructionEngine(PipelineConfig().with_overrides({"runtime.threads": 3})).estimate_depths(frames)
        for a, b in zip(serial, parallel):
            assert a.view_id == b.view_id
            np.testing.assert_array_equal(a.depth, b.depth)

    def test_single_view_rejected(self, small_room):
        _, frames = small_room
        with pytest.raises(DataError):
            ReconstructionEngine().estimate_depths(frames[:1])

    def test_ground_truth_requires_depth(self, small_room):
        _, frames = small_room
        with pytest.raises(DataError, match="frame 0"):
            ReconstructionEngine().ground_truth_depth(replace(frames[0], depth=None))


class TestReconstruct:
    """End-to-end feed-forward reconstruction"""

    def test_ground_truth_depth_run(self, small_room):
        _, frames = small_room
        result = reconstruct_frames(frames, PipelineConfig().with_overrides(GT))
        stats = result.stats()
        assert stats["total_lifted"] == 3 * 32 * 24
        assert 0 < stats["num_gaussians"] < stats["total_lifted"]
        assert stats["reduction_ratio"] == pytest.approx(stats["num_gaussians"] / stats["total_lifted"])
        assert [v["view_id"] for v in stats["views"]] == [0, 1, 2]
        assert "timings" not in stats
        assert set(result.timings) >= {"depth", "lift", "ptf", "wfr", "decode", "total"}
        assert result.primitives.size == result.global_triplets.size

    def test_predicted_depths_at_lift_resolution(self, small_room):
        _, frames = small_room
        result = reconstruct_frames(frames, PipelineConfig().with_overrides(GT))
        depths = result.predicted_depths()
        assert sorted(depths) == [0, 1, 2]
        np.testing.assert_allclose(depths[0], frames[0].depth.reshape(24, 2, 32, 2).mean(axis=(1, 3)), rtol=0.05)

    def test_matching_run(self, small_room):
        _, frames = small_room
        result = reconstruct_frames(frames)
        assert result.primitives.size > 0
        assert np.all(np.isfinite(result.primitives.means))

    def test_fusion_reduces_count(self, small_room):
        _, frames = small_room
        fused = reconstruct_frames(frames, PipelineConfig().with_overrides(GT))
        appended = reconstruct_frames(frames, PipelineConfig().with_overrides({**GT, "ptf.enable_fusion": False}))
        assert appended.primitives.size == appended.stats()["total_lifted"]
        assert fused.primitives.size < appended.primitives.size

    def test_non_input_views_ignored(self, small_room):
        _, frames = small_room
        frames = [frames[0], frames[1], replace(frames[2], split="extrap")]
        result = reconstruct_frames(frames, PipelineConfig().with_overrides(GT))
        assert [local.view_id for local in result.local_triplets] == [0, 1]

    def test_no_input_views(self, small_room):
        _, frames = small_room
        with pytest.raises(DataError):
            reconstruct_frames([replace(f, split="interp") for f in frames])


class TestFloaterRemoval:
    """Floater suppression on a scene with one inconsistent view"""

    def test_wfr_suppresses_planted_floater(self, floater_scene):
        sphere, frames = floater_scene
        kept = reconstruct_frames(frames, PipelineConfig().with_overrides({**GT, "wfr.enable_wfr": False}))
        cleaned = reconstruct_frames(frames, PipelineConfig().with_overrides(GT))
        before = kept.primitives.opacities[_near_floater(kept.primitives, sphere)]
        after = cleaned.primitives.opacities[_near_floater(cleaned.primitives, sphere)]
        assert before.size > 0 and after.size == before.size
        assert after.mean() < 0.7 * before.mean()
        assert cleaned.stats()["floater_indications"] > 0

    def test_direct_removal_deletes_floater(self, floater_scene):
        sphere, frames = floater_scene
        kept = reconstruct_frames(frames, PipelineConfig().with_overrides({**GT, "wfr.enable_wfr": False}))
        removed = reconstruct_frames(
            frames, PipelineConfig().with_overrides({**GT, "wfr.wfr_strategy": "direct_removal"})
        )
        assert removed.primitives.size < kept.primitives.size
        assert _near_floater(removed.primitives, sphere).sum() < _near_floater(kept.primitives, sphere).sum()
        assert removed.stats()["removed"] > 0


class TestAblationMatrix:
    """Every component toggle is a config change with a visible effect"""

    @pytest.fixture(scope="class")
    def runs(self, floater_scene):
        _, frames = floater_scene
        base = PipelineConfig().with_overrides(GT)
        variants = {
            "full": {},
            "wo_fusion": {"ptf.enable_fusion": False},
            "wo_floater_removal": {"wfr.enable_wfr": False},
            "wo_lower_resolution": {"lifting.stride": 1},
            "no_accumulate": {"wfr.wfr_strategy": "no_accumulate"},
            "uniform": {"wfr.wfr_strategy": "uniform"},
            "direct_removal": {"wfr.wfr_strategy": "direct_removal"},
        }
        return {name: reconstruct_frames(frames, base.with_overrides(o)) for name, o in variants.items()}

    def test_fusion_toggle(self, runs):
        assert runs["wo_fusion"].primitives.size == runs["wo_fusion"].stats()["total_lifted"]
        assert runs["full"].primitives.size < runs["wo_fusion"].primitives.size

    def test_floater_removal_toggle(self, runs):
        assert runs["wo_floater_removal"].stats()["floater_indications"] == 0
        assert runs["full"].stats()["floater_indications"] > 0
        assert runs["wo_floater_removal"].primitives.size == runs["full"].primitives.size
        assert runs["wo_floater_removal"].primitives.opacities.sum() > runs["full"].primitives.opacities.sum()

    def test_stride_toggle(self, runs):
        assert runs["wo_lower_resolution"].stats()["total_lifted"] == 4 * runs["full"].stats()["total_lifted"]

    def test_strategies_differ(self, runs):
        assert not np.array_equal(runs["uniform"].primitives.opacities, runs["full"].primitives.opacities)
        assert runs["direct_removal"].primitives.size < runs["full"].primitives.size
        for name in ("no_accumulate", "uniform"):
            assert runs[name].primitives.size == runs["full"].primitives.size
            assert runs[name].stats()["floater_indications"] == runs["full"].stats()["floater_indications"]


WALL_DEPTH = 3.0
WALL_VIEWS = 10
WALL_K = Intrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)
FLOATER_BOX = (slice(12, 36), slice(20, 52))
FLOATER_COLOR = (0.9, 0.1, 0.1)
OVERSHOOT_VIEW, OVERSHOOT_BOX = 4, (slice(4, 16), slice(4, 16))


def _wall_color(x, y):
    return np.stack([
        0.5 + 0.3 * np.sin(4.0 * x),
        0.5 + 0.3 * np.cos(3.0 * y),
        0.5 + 0.2 * np.sin(2.0 * (x + y)),
    ], axis=-1)


def _wall_frames(overshoot: bool = False):
    """
    Ten views sliding along x in front of a fronto-parallel wall

    The last view's depth and colour carry a patch 0.5 m in front of the wall that no
    other view sees. With `overshoot`, one earlier view also reads a region 0.3 m behind
    the wall, the way a wrong match looks through a surface.

    Returns:
        (frames, clean colour of the last view)
    """
    v, u = np.mgrid[0:WALL_K.height, 0:WALL_K.width].astype(np.float64)
    frames = []
    for k in range(WALL_VIEWS):
        center_x = 0.05 * (k - (WALL_VIEWS - 1) / 2.0)
        camera = Camera(WALL_K, Pose(np.eye(3), [-center_x, 0.0, 0.0]))
        x = (u - WALL_K.cx) * WALL_DEPTH / WALL_K.fx + center_x
        y = (v - WALL_K.cy) * WALL_DEPTH / WALL_K.fy
        depth = np.full(WALL_K.shape, WALL_DEPTH)
        frames.append(make_frame(k, _wall_color(x, y), camera, depth))

    clean = frames[-1].image.copy()
    frames[-1].image[FLOATER_BOX] = FLOATER_COLOR
    frames[-1].depth[FLOATER_BOX] = WALL_DEPTH - 0.5
    if overshoot:
        frames[OVERSHOOT_VIEW].depth[OVERSHOOT_BOX] = WALL_DEPTH + 0.3
    return frames, clean


def _render_last(result, frames):
    """Colour and alpha-normalised depth of the last view"""
    out = render(result.primitives, frames[-1].camera)
    depth = np.where(out.alpha > 0.5, out.depth / np.maximum(out.alpha, 1e-12), 0.0)
    return out.color, depth


def _in_front_of_wall(centers: np.ndarray) -> np.ndarray:
    return centers[:, 2] < WALL_DEPTH - 0.25


def _wall_depth_delta(result, frames) -> float:
    _, depth = _render_last(result, frames)
    return depth_metrics(depth, np.full(WALL_K.shape, WALL_DEPTH))["delta_1.1"]


@pytest.fixture(scope="module")
def wall_runs():
    """The planted-floater wall reconstructed with floater removal off and with every strategy"""
    frames, _ = _wall_frames()
    base = PipelineConfig().with_overrides(GT)
    variants = {
        "off": {"wfr.enable_wfr": False},
        "neighbor_accumulate": {},
        "no_accumulate": {"wfr.wfr_strategy": "no_accumulate"},
        "uniform": {"wfr.wfr_strategy": "uniform"},
        "direct_removal": {"wfr.wfr_strategy": "direct_removal"},
    }
    runs = {name: reconstruct_frames(frames, base.with_overrides(o)) for name, o in variants.items()}
    return runs, frames


class TestWallFloater:
    """A floater 0.5 m in front of a wall that ten views observe"""

    def test_floater_alpha_suppressed(self, wall_runs):
        runs, _ = wall_runs
        floater = _in_front_of_wall(runs["off"].primitives.means)
        assert floater.sum() == 16 * 12
        assert runs["off"].primitives.opacities[floater].min() > 0.5

        prims = runs["neighbor_accumulate"].primitives
        floater = _in_front_of_wall(prims.means)
        assert floater.sum() == 16 * 12
        assert prims.opacities[floater].max() < 0.01

    def test_wall_keeps_beta(self, wall_runs):
        runs, _ = wall_runs
        g = runs["neighbor_accumulate"].global_triplets
        wall = ~_in_front_of_wall(g.centers)
        assert wall.sum() > 0
        assert np.mean(g.betas[wall] == 1.0) >= 0.99

    def test_rendered_depth_improves(self, wall_runs):
        runs, frames = wall_runs
        before = _wall_depth_delta(runs["off"], frames)
        after = _wall_depth_delta(runs["neighbor_accumulate"], frames)
        assert after >= before + 0.05

    def test_strategy_depth_ordering(self, wall_runs):
        runs, frames = wall_runs
        scores = {
            name: _wall_depth_delta(runs[name], frames) for name in ("neighbor_accumulate", "no_accumulate", "uniform")
        }
        assert scores["neighbor_accumulate"] >= scores["no_accumulate"] >= scores["uniform"]

    def test_direct_removal_deletes_only_floater(self, wall_runs):
        runs, _ = wall_runs
        removed = runs["direct_removal"]
        assert not _in_front_of_wall(removed.primitives.means).any()
        assert removed.primitives.size == runs["off"].primitives.size - 16 * 12

    def test_neighbor_evidence_keeps_supported_wall(self):
        frames, clean = _wall_frames(overshoot=True)
        base = PipelineConfig().with_overrides(GT)
        kept = reconstruct_frames(frames, base)
        removed = reconstruct_frames(frames, base.with_overrides({"wfr.wfr_strategy": "direct_removal"}))
        wall = ~_in_front_of_wall(kept.global_triplets.centers)
        assert np.mean(kept.global_triplets.betas[wall] == 1.0) >= 0.99
        assert removed.stats()["removed"] > 16 * 12

        kept_color, _ = _render_last(kept, frames)
        removed_color, _ = _render_last(removed, frames)
        assert psnr(kept_color, clean) >= psnr(removed_color, clean)
