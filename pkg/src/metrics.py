"""
Metrics
Image and depth quality measures used by evaluation and fine-tuning
"""

import logging
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter1d

from src.errors import GeometryError

logger = logging.getLogger(__name__)

PSNR_IDENTICAL = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEPTH_THRESHOLDS = (1.25, 1.1)


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise GeometryError(f"Shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio for images in [0, 1]

    Returns:
        10 log10(1 / MSE), or 99.0 for identical images
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=32)
def _window_matrix(n: int) -> np.ndarray:
    """Dense operator of the 1D Gaussian window along an axis of length n"""
    matrix = gaussian_filter1d(np.eye(n), SSIM_SIGMA, axis=0, mode="reflect", truncate=SSIM_TRUNCATE)
    matrix.setflags(write=False)
    return matrix


def _as_channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 2 else np.moveaxis(image, -1, 0)


def _blur(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return rows @ x @ cols.T


def _blur_adjoint(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return rows.T @ x @ cols


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    rows = _window_matrix(a.shape[1])
    cols = _window_matrix(a.shape[2])
    mu_a = _blur(a, rows, cols)
    mu_b = _blur(b, rows, cols)
    e_aa = _blur(a * a, rows, cols)
    e_bb = _blur(b * b, rows, cols)
    e_ab = _blur(a * b, rows, cols)

    num_l = 2.0 * mu_a * mu_b + SSIM_C1
    num_cs = 2.0 * (e_ab - mu_a * mu_b) + SSIM_C2
    den_l = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    den_cs = (e_aa - mu_a * mu_a) + (e_bb - mu_b * mu_b) + SSIM_C2
    ssim_map = num_l * num_cs / (den_l * den_cs)
    return ssim_map, (rows, cols, mu_a, mu_b, num_l, num_cs, den_l, den_cs)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean structural similarity with an 11-pixel Gaussian window (sigma 1.5)

    Args:
        a, b: H x W or H x W x C images in [0, 1]

    Returns:
        Mean local SSIM over pixels and channels
    """
    _check_shapes(np.asarray(a), np.asarray(b))
    ssim_map, _ = _ssim_terms(_as_channels(a), _as_channels(b))
    return float(ssim_map.mean())


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean SSIM and its gradient with respect to the first image

    Returns:
        (value, d value / d a) with the gradient shaped like a
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    a_c, b_c = _as_channels(a), _as_channels(b)
    ssim_map, (rows, cols, mu_a, mu_b, num_l, num_cs, den_l, den_cs) = _ssim_terms(a_c, b_c)

    upstream = 1.0 / ssim_map.size
    g_mu = upstream * ssim_map * (
        2.0 * mu_b / num_l - 2.0 * mu_b / num_cs - 2.0 * mu_a / den_l + 2.0 * mu_a / den_cs
    )
    g_e_aa = -upstream * ssim_map / den_cs
    g_e_ab = 2.0 * upstream * ssim_map / num_cs

    grad = (
        _blur_adjoint(g_mu, rows, cols)
        + 2.0 * a_c * _blur_adjoint(g_e_aa, rows, cols)
        + b_c * _blur_adjoint(g_e_ab, rows, cols)
    )
    grad = grad[0] if a.ndim == 2 else np.moveaxis(grad, 0, -1)
    return float(ssim_map.mean()), grad


def depth_metrics(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """
    Depth accuracy over pixels where both maps are valid (> 0)

    Args:
        pred: Predicted depth (m)
        gt: Reference depth (m)

    Returns:
        {"abs_diff", "abs_rel", "delta_1.25", "delta_1.1", "valid_pixels"}
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    valid = (pred > 0) & (gt > 0)
    if not valid.any():
        raise GeometryError("No pixel has valid predicted and reference depth")

    p, g = pred[valid], gt[valid]
    error = np.abs(p - g)
    ratio = np.maximum(p / g, g / p)
    result = {
        "abs_diff": float(error.mean()),
        "abs_rel": float((error / g).mean()),
    }
    for threshold in DEPTH_THRESHOLDS:
        result[f"delta_{threshold}"] = float((ratio < threshold).mean())
    result["valid_pixels"] = int(valid.sum())
    return result
