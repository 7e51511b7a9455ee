"""
Fine-tuning
Analytic backward pass through the tile rasterizer and depth-regularized
per-scene refinement of Gaussian primitives.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from tqdm import tqdm

from src.config import FinetuneConfig, RendererConfig
from src.errors import DivergenceError, GeometryError
from src.gaussian_map import ALPHA_RANGE, SCALE_RANGE, GaussianPrimitives
from src.geometry import Camera, CameraFrame, covariance_matrices, perspective_jacobian, quat_to_rotmat
from src.metrics import psnr, ssim_with_grad
from src.optim import Adam
from src.renderer import (
    MIN_TRANSMITTANCE,
    RenderedImage,
    blend_tile,
    iter_tiles,
    prepare_splats,
    render,
    tile_splats,
)
from src.scene_io import export_ply
from src.utils import ensure_directory, progress_enabled

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iteration", "view", "total", "color", "ssim", "depth"]


@dataclass
class PrimitiveGradients:
    """Loss gradients per primitive parameter"""
    means: np.ndarray           # (N, 3)
    log_scales: np.ndarray      # (N, 3) w.r.t. log of each axis scale
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "PrimitiveGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))


@dataclass
class LossTerms:
    """Scalar loss and its per-pixel gradients"""
    total: float
    color: float
    ssim: float
    depth: float
    grad_color: np.ndarray  # (H, W, 3)
    grad_depth: np.ndarray  # (H, W)


@dataclass
class FinetuneResult:
    scene: GaussianPrimitives
    trace: pd.DataFrame
    initial_psnr: float
    final_psnr: float


def render_backward(
    prims: GaussianPrimitives,
    camera: Camera,
    grad_color: np.ndarray,
    grad_depth: np.ndarray,
    tile_size: int = 16,
    near_plane: float = 0.05,
) -> PrimitiveGradients:
    """
    Exact gradients of the rendered colour and depth with respect to the primitives

    The forward blend is recomputed tile by tile; culled or non-contributing
    Gaussians receive zero gradients.

    Args:
        prims: Primitives that were rendered
        camera: Camera of the render
        grad_color: dL/dcolor (H, W, 3)
        grad_depth: dL/ddepth (H, W)
        tile_size: Tile edge used for the recomputation
        near_plane: Near clipping depth (m)

    Returns:
        PrimitiveGradients
    """
    height, width = camera.shape
    if grad_color.shape != (height, width, 3) or grad_depth.shape != (height, width):
        raise GeometryError(
            f"Upstream gradients {grad_color.shape}/{grad_depth.shape} do not match image {height}x{width}"
        )
    grads = PrimitiveGradients.zeros(prims.size)
    splats = prepare_splats(prims, camera, near_plane)
    if splats.size == 0:
        return grads

    n = splats.size
    g_colors = np.zeros((n, 3))
    g_zval = np.zeros(n)
    g_opacity = np.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))  # w.r.t. (a, b, c) of the conic, b counted once

    for y0, y1, x0, x1 in iter_tiles(height, width, tile_size):
        ids = tile_splats(splats, y0, y1, x0, x1)
        if len(ids) == 0:
            continue
        py, px = np.mgrid[y0:y1, x0:x1]
        blend = blend_tile(splats, ids, px.ravel().astype(np.float64), py.ravel().astype(np.float64))
        w = blend.weights
        gc = grad_color[y0:y1, x0:x1].reshape(-1, 3)
        gd = grad_depth[y0:y1, x0:x1].ravel()
        gd = np.where(w.sum(axis=1) < MIN_TRANSMITTANCE, 0.0, gd)

        colors = splats.colors[ids]
        depths = splats.depths[ids]
        g_colors[ids] += w.T @ gc
        g_zval[ids] += w.T @ gd

        value = gc @ colors.T + gd[:, None] * depths[None, :]
        weighted = w * value
        behind = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] - weighted
        active = (blend.transmittance >= MIN_TRANSMITTANCE) & (blend.alpha > 0) & ~blend.clamped
        g_alpha = np.where(active, blend.transmittance * value - behind / (1.0 - blend.alpha), 0.0)

        g_opacity[ids] += np.sum(g_alpha * blend.gauss, axis=0)
        g_power = g_alpha * splats.opacities[ids] * blend.gauss
        conic = splats.conics[ids]
        dx, dy = blend.dx, blend.dy
        g_conic[ids, 0] += np.sum(-0.5 * dx * dx * g_power, axis=0)
        g_conic[ids, 1] += np.sum(-dx * dy * g_power, axis=0)
        g_conic[ids, 2] += np.sum(-0.5 * dy * dy * g_power, axis=0)
        g_mean2d[ids, 0] += np.sum(g_power * (conic[:, 0] * dx + conic[:, 1] * dy), axis=0)
        g_mean2d[ids, 1] += np.sum(g_power * (conic[:, 1] * dx + conic[:, 2] * dy), axis=0)

    K, pose = camera.intrinsics, camera.pose
    index = splats.index
    rot_w = pose.rotation
    x_cam = pose.apply(prims.means[index])
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]

    # conic = inverse(cov2d): dL/dcov2d = -Q G_Q Q
    conic_m = np.stack([
        np.stack([splats.conics[:, 0], splats.conics[:, 1]], axis=-1),
        np.stack([splats.conics[:, 1], splats.conics[:, 2]], axis=-1),
    ], axis=1)
    g_conic_m = np.stack([
        np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], axis=-1),
        np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], axis=-1),
    ], axis=1)
    g_cov2d = -conic_m @ g_conic_m @ conic_m

    jac = perspective_jacobian(K, x_cam)
    m = jac @ rot_w
    cov3d = covariance_matrices(prims.quaternions[index], prims.scales[index])
    g_cov3d = np.swapaxes(m, 1, 2) @ g_cov2d @ m
    g_jac = 2.0 * g_cov2d @ m @ cov3d @ rot_w.T

    rot_q = quat_to_rotmat(prims.quaternions[index])
    local = np.swapaxes(rot_q, 1, 2) @ g_cov3d @ rot_q
    scales = prims.scales[index]
    grads.log_scales[index] = 2.0 * scales * scales * np.diagonal(local, axis1=1, axis2=2)

    fx, fy = K.fx, K.fy
    z2 = z * z
    z3 = z2 * z
    g_x = g_mean2d[:, 0] * fx / z - g_jac[:, 0, 2] * fx / z2
    g_y = g_mean2d[:, 1] * fy / z - g_jac[:, 1, 2] * fy / z2
    g_z = (
        g_zval
        - g_mean2d[:, 0] * fx * x / z2
        - g_mean2d[:, 1] * fy * y / z2
        - g_jac[:, 0, 0] * fx / z2
        + g_jac[:, 0, 2] * 2.0 * fx * x / z3
        - g_jac[:, 1, 1] * fy / z2
        + g_jac[:, 1, 2] * 2.0 * fy * y / z3
    )
    grads.means[index] = np.stack([g_x, g_y, g_z], axis=-1) @ rot_w

    alpha = splats.opacities
    grads.opacity_logits[index] = g_opacity * alpha * (1.0 - alpha)
    grads.colors[index] = g_colors
    return grads


def loss_rft(
    rendered: RenderedImage,
    gt_image: np.ndarray,
    anchor_depth: np.ndarray,
    lambda_ssim: float = 0.2,
    lambda_depth: float = 0.1,
    use_ssim_loss: bool = False,
) -> LossTerms:
    """
    Colour L1 (+ optional SSIM) plus L1 to the frozen depth anchor

    With use_ssim_loss the colour part is (1 - lambda_ssim) L1 + lambda_ssim (1 - SSIM);
    without it the colour part is plain L1.

    Args:
        rendered: Current render
        gt_image: Training image (H, W, 3)
        anchor_depth: Frozen depth render of the feed-forward scene (H, W)
        lambda_ssim: SSIM mixing weight in [0, 1)
        lambda_depth: Depth anchor weight (0 gives unregularized fine-tuning)
        use_ssim_loss: Include the SSIM term

    Returns:
        LossTerms with pixel gradients
    """
    if rendered.color.shape != gt_image.shape or rendered.depth.shape != anchor_depth.shape:
        raise GeometryError(
            f"Render {rendered.color.shape} does not match targets {gt_image.shape}/{anchor_depth.shape}"
        )
    if not 0.0 <= lambda_ssim < 1.0 or lambda_depth < 0:
        raise GeometryError(f"Invalid loss weights lambda_ssim={lambda_ssim}, lambda_depth={lambda_depth}")

    color_diff = rendered.color - gt_image
    l_color = float(np.abs(color_diff).mean())
    g_l1 = np.sign(color_diff) / color_diff.size

    depth_diff = rendered.depth - anchor_depth
    l_depth = float(np.abs(depth_diff).mean())
    grad_depth = lambda_depth * np.sign(depth_diff) / depth_diff.size

    if use_ssim_loss:
        value, g_ssim = ssim_with_grad(rendered.color, gt_image)
        l_ssim = 1.0 - value
        total = (1.0 - lambda_ssim) * l_color + lambda_ssim * l_ssim + lambda_depth * l_depth
        grad_color = (1.0 - lambda_ssim) * g_l1 - lambda_ssim * g_ssim
    else:
        l_ssim = 0.0
        total = l_color + lambda_depth * l_depth
        grad_color = g_l1

    return LossTerms(total, l_color, l_ssim, l_depth, grad_color, grad_depth)


def render_anchor_depths(
    scene: GaussianPrimitives,
    frames: Sequence[CameraFrame],
    renderer: Optional[RendererConfig] = None,
) -> Dict[int, np.ndarray]:
    """
    Depth renders of the scene before optimization, one per training frame

    Returns:
        Read-only depth maps keyed by frame index
    """
    renderer = renderer or RendererConfig()
    anchors = {}
    for frame in frames:
        depth = render(scene, frame.camera, renderer.tile_size, renderer.near_plane).depth
        depth.setflags(write=False)
        anchors[frame.index] = depth
    return anchors


def select_training_frames(frames: Sequence[CameraFrame], mode: str = "input") -> List[CameraFrame]:
    """Input views only (sparse) or everything except extrapolation views (dense)"""
    if mode == "input":
        selected = [f for f in frames if f.split == "input"]
    elif mode == "all":
        selected = [f for f in frames if f.split != "extrap"]
    else:
        raise GeometryError(f"Unknown training view mode '{mode}'")
    if not selected:
        raise GeometryError(f"No training frames for mode '{mode}'")
    return selected


def scene_extent(frames: Sequence[CameraFrame]) -> float:
    """1.1 x the largest camera distance from the mean camera centre (1.0 if degenerate)"""
    centers = np.stack([f.camera.pose.center for f in frames])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()) * 1.1
    return radius if radius > 0 else 1.0


def _assemble(
    base: GaussianPrimitives,
    means: np.ndarray,
    log_scales: np.ndarray,
    scale_offset: np.ndarray,
    opacity_logits: np.ndarray,
    colors: np.ndarray,
) -> GaussianPrimitives:
    return GaussianPrimitives(
        means=means.copy(),
        quaternions=base.quaternions,
        scales=np.clip(np.exp(log_scales + scale_offset[:, None]), *SCALE_RANGE),
        opacities=np.clip(expit(opacity_logits), *ALPHA_RANGE),
        colors=colors.copy(),
    )


def mean_psnr(scene: GaussianPrimitives, frames: Sequence[CameraFrame], renderer: RendererConfig) -> float:
    values = [psnr(render(scene, f.camera, renderer.tile_size, renderer.near_plane).color, f.image) for f in frames]
    return float(np.mean(values))


def run_finetune(
    scene: GaussianPrimitives,
    frames: Sequence[CameraFrame],
    anchors: Dict[int, np.ndarray],
    config: Optional[FinetuneConfig] = None,
    renderer: Optional[RendererConfig] = None,
    seed: int = 0,
    checkpoint_dir: Optional[str] = None,
) -> FinetuneResult:
    """
    Depth-regularized refinement of colours, means, scales and opacities

    Quaternions stay fixed and every Gaussian keeps its anisotropy: the three log-scales
    share one learned offset. No densification or pruning happens.

    Args:
        scene: Feed-forward primitives
        frames: Training frames
        anchors: Frozen depth renders keyed by frame index
        config: Fine-tuning settings (iters, loss weights, learning rates, ...)
        renderer: Tile size and near plane
        seed: Seed for random view sampling
        checkpoint_dir: Where periodic PLY checkpoints go (if enabled)

    Returns:
        FinetuneResult with the refined scene and the loss trace
    """
    config = config or FinetuneConfig()
    renderer = renderer or RendererConfig()
    frames = list(frames)
    if not frames:
        raise GeometryError("Fine-tuning needs at least one training frame")
    missing = [f.index for f in frames if f.index not in anchors]
    if missing:
        raise GeometryError(f"No anchor depth for frames {missing}")

    if config.iters == 0 or scene.size == 0:
        score = mean_psnr(scene, frames, renderer) if scene.size else 0.0
        return FinetuneResult(scene.copy(), pd.DataFrame(columns=TRACE_COLUMNS), score, score)

    extent = scene_extent(frames)
    params = {
        "means": scene.means.astype(np.float64).copy(),
        "scale_offset": np.zeros(scene.size),
        "opacity_logits": logit(np.clip(scene.opacities, *ALPHA_RANGE)),
        "colors": scene.colors.astype(np.float64).copy(),
    }
    log_scales = np.log(np.clip(scene.scales, *SCALE_RANGE))
    optimizer = Adam({
        "means": config.lr_means * extent,
        "scale_offset": config.lr_log_scales,
        "opacity_logits": config.lr_opacity,
        "colors": config.lr_colors,
    })

    rng = np.random.default_rng(seed)
    first_loss: Dict[int, float] = {}
    rows = []
    initial_psnr = mean_psnr(scene, frames, renderer)
    logger.info(f"Fine-tuning {scene.size} Gaussians on {len(frames)} views for {config.iters} iterations")

    progress = tqdm(range(config.iters), desc="Fine-tuning", disable=not progress_enabled())
    for iteration in progress:
        if config.view_sampling == "random":
            frame = frames[int(rng.integers(len(frames)))]
        else:
            frame = frames[iteration % len(frames)]

        current = _assemble(scene, params["means"], log_scales, params["scale_offset"],
                            params["opacity_logits"], params["colors"])
        rendered = render(current, frame.camera, renderer.tile_size, renderer.near_plane)
        terms = loss_rft(
            rendered, frame.image, anchors[frame.index],
            config.lambda_ssim, config.lambda_depth, config.use_ssim_loss,
        )

        reference = first_loss.setdefault(frame.index, terms.total)
        if not np.isfinite(terms.total) or terms.total > config.divergence_factor * max(reference, 1e-12):
            raise DivergenceError(
                f"Loss {terms.total:.6f} at iteration {iteration} exceeds "
                f"{config.divergence_factor}x the first loss {reference:.6f} of view {frame.index}"
            )
        rows.append((iteration, frame.index, terms.total, terms.color, terms.ssim, terms.depth))

        grads = render_backward(current, frame.camera, terms.grad_color, terms.grad_depth,
                                renderer.tile_size, renderer.near_plane)
        optimizer.step(params, {
            "means": grads.means,
            "scale_offset": grads.log_scales.sum(axis=1),
            "opacity_logits": grads.opacity_logits,
            "colors": grads.colors,
        })
        np.clip(params["colors"], 0.0, 1.0, out=params["colors"])
        progress.set_postfix(loss=f"{terms.total:.4f}")

        if checkpoint_dir and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            snapshot = _assemble(scene, params["means"], log_scales, params["scale_offset"],
                                 params["opacity_logits"], params["colors"])
            path = ensure_directory(checkpoint_dir) / f"checkpoint_{iteration + 1:06d}.ply"
            export_ply(snapshot, str(path))
            logger.debug(f"Wrote checkpoint {path}")

    refined = _assemble(scene, params["means"], log_scales, params["scale_offset"],
                        params["opacity_logits"], params["colors"])
    final_psnr = mean_psnr(refined, frames, renderer)
    logger.info(f"Fine-tuning PSNR {initial_psnr:.2f} dB -> {final_psnr:.2f} dB")
    return FinetuneResult(refined, pd.DataFrame(rows, columns=TRACE_COLUMNS), initial_psnr, final_psnr)


def write_loss_trace(result: FinetuneResult, path: str, config: FinetuneConfig):
    """
    Write the loss trace as CSV, preceded by '#' lines echoing the effective settings

    Read it back with pandas.read_csv(path, comment="#").
    """
    file_path = Path(path)
    ensure_directory(str(file_path.parent))
    with open(file_path, "w") as f:
        for key, value in config.model_dump().items():
            f.write(f"# {key}={value}\n")
        f.write(f"# initial_psnr={result.initial_psnr:.4f}\n")
        f.write(f"# final_psnr={result.final_psnr:.4f}\n")
        result.trace.to_csv(f, index=False)
