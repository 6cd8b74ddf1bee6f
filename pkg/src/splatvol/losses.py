"""Image and volume losses: L1, SSIM, PSNR, the offset hinge regularizer,
the fitting loss, and the two-stage reconstruction loss.

SSIM uses the conventional 11x11 Gaussian window (sigma 1.5) with constants
C1 = 0.01^2 and C2 = 0.03^2 on [0, 1]-range images.  Window sums use
zero-padded same-size convolution so the metric (and its gradient) stays
defined on images smaller than the window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, ShapeError
from .model import Bounds, GaussianVolume, ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    """Weights for every loss in the toolkit.

    ``lambda_l1``, ``lambda_ssim`` and ``lambda_offsets`` weight the fitting
    loss; ``render_mix`` blends L1 against SSIM inside the stage-2 rendering
    loss; ``lambda_3d`` / ``lambda_2d`` combine the stage-2 terms.
    ``epsilon_offsets`` is the hinge width of the offset regularizer in
    world units; leave it None to derive half a voxel spacing from the
    volume being fitted.
    """

    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_offsets: float = 0.1
    render_mix: float = 0.8
    lambda_3d: float = 1.0
    lambda_2d: float = 0.1
    epsilon_offsets: float | None = None

    def __post_init__(self):
        for name in ("lambda_l1", "lambda_ssim", "lambda_offsets", "lambda_3d", "lambda_2d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.render_mix <= 1.0:
            raise ConfigError("render_mix must lie in [0, 1]")
        if self.epsilon_offsets is not None and self.epsilon_offsets <= 0:
            raise ConfigError("epsilon_offsets must be > 0")


def default_epsilon_offsets(bounds: Bounds, resolution: int) -> float:
    """Half the voxel spacing: offsets stay within their own lattice cell."""
    return float(bounds.spacing(resolution).min() / 2.0)


def _rgb(image) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return np.asarray(image.rgb, dtype=np.float64)
    return np.asarray(image, dtype=np.float64)


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL_1D = _ssim_kernel()


def _window_filter(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window sums per channel, zero padded, same size."""
    out = correlate1d(img, _KERNEL_1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL_1D, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    u = _window_filter(x)
    v = _window_filter(y)
    p = _window_filter(x * x)
    q = _window_filter(y * y)
    r = _window_filter(x * y)
    a1 = 2.0 * u * v + SSIM_C1
    a2 = 2.0 * (r - u * v) + SSIM_C2
    b1 = u * u + v * v + SSIM_C1
    b2 = (p - u * u) + (q - v * v) + SSIM_C2
    return u, v, a1, a2, b1, b2


def ssim(x, y) -> float:
    """Mean structural similarity over pixels and channels."""
    x, y = _rgb(x), _rgb(y)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_gradient(x, y) -> tuple[float, np.ndarray]:
    """SSIM value and its gradient with respect to the first image."""
    x, y = _rgb(x), _rgb(y)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    u, v, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = (a1 * a2) / (b1 * b2)
    # Partials of the per-pixel map wrt the window sums u = G*x, p = G*(x^2),
    # r = G*(x*y); the window is symmetric so the adjoint of the zero-padded
    # convolution is the convolution itself.
    ds_du = 2.0 * v * (a2 - a1) / (b1 * b2) - 2.0 * u * s * (1.0 / b1 - 1.0 / b2)
    ds_dp = -s / b2
    ds_dr = 2.0 * a1 / (b1 * b2)
    grad = _window_filter(ds_du) + 2.0 * x * _window_filter(ds_dp) + y * _window_filter(ds_dr)
    return float(np.mean(s)), grad / x.size


def psnr(mse: float) -> float:
    if mse <= 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def image_terms(rendered, target) -> tuple[float, float, float]:
    """(L1, SSIM, PSNR) between two equally sized images."""
    x, y = _rgb(rendered), _rgb(target)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff * diff))
    return l1, ssim(x, y), psnr(mse)


def offsets_reg(volume: GaussianVolume, epsilon_offsets: float) -> float:
    """Hinge penalty on offset components exceeding ``epsilon_offsets``,
    averaged over active Gaussians and the 3 components."""
    if epsilon_offsets <= 0:
        raise ConfigError("epsilon_offsets must be > 0")
    off = volume.offsets[volume.active_mask].astype(np.float64)
    if off.size == 0:
        return 0.0
    excess = np.maximum(np.abs(off) - epsilon_offsets, 0.0)
    return float(excess.mean())


def offsets_reg_gradient(volume: GaussianVolume, epsilon_offsets: float) -> np.ndarray:
    """(K, 3) gradient of :func:`offsets_reg`; exactly zero on inactive points."""
    if epsilon_offsets <= 0:
        raise ConfigError("epsilon_offsets must be > 0")
    grad = np.zeros((volume.n_points, 3), dtype=np.float64)
    active = volume.active_mask
    n_active = int(np.count_nonzero(active))
    if n_active == 0:
        return grad
    off = volume.offsets[active].astype(np.float64)
    g = np.sign(off) * (np.abs(off) > epsilon_offsets)
    grad[active] = g / (3.0 * n_active)
    return grad


@dataclass
class FittingLoss:
    """Fitting loss value plus the gradients the optimizer consumes."""

    total: float
    l1: float
    ssim: float
    psnr: float
    offsets: float
    image_gradient: np.ndarray   # (H, W, 3) d(total)/d(rendered rgb)
    offset_gradient: np.ndarray  # (K, 3)    d(total)/d(offsets)


def fitting_loss(rendered, target, volume: GaussianVolume, weights: LossWeights,
                 epsilon_offsets: float | None = None) -> FittingLoss:
    """Weighted L1 + (1 - SSIM) + offset hinge, with its analytic gradients."""
    eps = epsilon_offsets if epsilon_offsets is not None else weights.epsilon_offsets
    if eps is None:
        eps = default_epsilon_offsets(volume.bounds, volume.resolution)
    x, y = _rgb(rendered), _rgb(target)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff * diff))
    ssim_val, ssim_grad = ssim_gradient(x, y)
    reg = offsets_reg(volume, eps)
    total = (weights.lambda_l1 * l1
             + weights.lambda_ssim * (1.0 - ssim_val)
             + weights.lambda_offsets * reg)
    image_grad = (weights.lambda_l1 * np.sign(diff) / diff.size
                  - weights.lambda_ssim * ssim_grad)
    offset_grad = weights.lambda_offsets * offsets_reg_gradient(volume, eps)
    return FittingLoss(
        total=total, l1=l1, ssim=ssim_val, psnr=psnr(mse), offsets=reg,
        image_gradient=image_grad, offset_gradient=offset_grad,
    )


def volume_mse(pred: GaussianVolume, gt: GaussianVolume) -> float:
    """Mean squared error over all stored attribute channels."""
    if pred.resolution != gt.resolution:
        raise ShapeError(f"volume resolutions differ: {pred.resolution} vs {gt.resolution}")
    a = pred.channel_matrix().astype(np.float64)
    b = gt.channel_matrix().astype(np.float64)
    return float(np.mean((a - b) ** 2))


def stage2_losses(pred_volume: GaussianVolume, gt_volume: GaussianVolume,
                  rendered, target, weights: LossWeights) -> float:
    """Combined reconstruction loss: weighted volume MSE plus the rendering
    loss ``render_mix * L1 + (1 - render_mix) * (1 - SSIM)``."""
    l3d = volume_mse(pred_volume, gt_volume)
    l1, ssim_val, _ = image_terms(rendered, target)
    l2d = weights.render_mix * l1 + (1.0 - weights.render_mix) * (1.0 - ssim_val)
    return weights.lambda_3d * l3d + weights.lambda_2d * l2d
