"""Differentiable rasterization of a Gaussian volume.

The forward pass projects every active Gaussian, sorts by camera depth
(ties broken by grid index), bins splats into 16x16 pixel tiles by a
conservative ellipse bounding box, and composites front to back.  The
backward pass recomputes per-tile blending states and returns exact
partials of the upstream image loss with respect to every stored attribute,
chained through activation, the covariance factorization, projection, and
alpha blending.  Deactivated Gaussians never enter the pipeline, so their
gradients are exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateRotationError, RenderError, RenderStateError
from .model import Camera, GaussianVolume, ImageBuffer
from .projection import (CULL_CONFIDENCE_RADIUS, quaternions_to_rotations,
                         rotation_gradient_to_quaternion)

_QUAT_NORM_EPS = 1e-12


@dataclass(frozen=True)
class RenderOptions:
    """Rasterizer knobs.

    ``bin_sigma`` controls the conservative tile-binning radius in units of
    the splat's screen-space standard deviation; contributions outside it
    fall below the kernel's exp cutoff, so the default keeps binning
    decisions invisible to finite-difference gradient checks.
    """

    near: float = 0.01
    lowpass: float = 0.3
    tile_size: int = 16
    bin_sigma: float = 7.0


DEFAULT_OPTIONS = RenderOptions()


@dataclass
class GradientBuffer:
    """Per-point loss partials produced by :func:`render_backward`.

    ``viewspace_grad_norm`` holds the norm of the summed screen-space
    positional gradient for this view; ``visible`` marks splats that
    survived culling.  Entries of deactivated points are exactly zero.
    """

    offset: np.ndarray               # (K, 3)
    log_scale: np.ndarray            # (K, 3)
    rotation: np.ndarray             # (K, 4)
    opacity_logit: np.ndarray        # (K,)
    color: np.ndarray                # (K, 3)
    viewspace_grad_norm: np.ndarray  # (K,)
    visible: np.ndarray              # (K,) bool

    @staticmethod
    def zeros(n_points: int) -> "GradientBuffer":
        return GradientBuffer(
            offset=np.zeros((n_points, 3)),
            log_scale=np.zeros((n_points, 3)),
            rotation=np.zeros((n_points, 4)),
            opacity_logit=np.zeros(n_points),
            color=np.zeros((n_points, 3)),
            viewspace_grad_norm=np.zeros(n_points),
            visible=np.zeros(n_points, dtype=bool),
        )


def _check_finite(volume: GaussianVolume, indices: np.ndarray) -> None:
    if indices.size == 0:
        return
    channels = (
        ("offset", volume.offsets), ("log_scale", volume.log_scales),
        ("rotation", volume.rotations), ("opacity_logit", volume.opacity_logits),
        ("color", volume.colors),
    )
    for name, arr in channels:
        rows = arr[indices]
        finite = np.isfinite(rows).reshape(len(indices), -1).all(axis=1)
        if not finite.all():
            bad = int(indices[np.nonzero(~finite)[0][0]])
            raise RenderError(f"non-finite {name} on gaussian {bad}")


class _View:
    """Projection of the active set into one camera, plus everything the
    backward chain needs."""

    def __init__(self, volume: GaussianVolume, cam: Camera, options: RenderOptions):
        self.cam = cam
        self.options = options
        idx = np.nonzero(volume.active_mask)[0]
        _check_finite(volume, idx)

        offsets = volume.offsets[idx].astype(np.float64)
        log_scales = volume.log_scales[idx].astype(np.float64)
        q_raw = volume.rotations[idx].astype(np.float64)
        logits = volume.opacity_logits[idx].astype(np.float64)
        colors = volume.colors[idx].astype(np.float64)

        qnorm = np.linalg.norm(q_raw, axis=1)
        if idx.size and qnorm.min() <= _QUAT_NORM_EPS:
            bad = int(idx[int(np.argmin(qnorm))])
            raise DegenerateRotationError(f"zero-norm quaternion on gaussian {bad}")
        qhat = q_raw / qnorm[:, None] if idx.size else q_raw
        rot = quaternions_to_rotations(qhat)
        var = np.exp(2.0 * log_scales)
        # Sigma = R diag(var) R^T, kept in camera space as M = W Sigma W^T.
        sigma = np.einsum("nij,nj,nkj->nik", rot, var, rot)
        w = cam.rotation
        m_cam = np.einsum("ij,njk,lk->nil", w, sigma, w)

        centers = volume.grid_positions()[idx] + offsets
        t_cam = centers @ w.T + cam.translation
        z = t_cam[:, 2]
        in_front = z > options.near
        z_safe = np.where(in_front, z, 1.0)

        u = cam.fx * t_cam[:, 0] / z_safe + cam.cx
        v = cam.fy * t_cam[:, 1] / z_safe + cam.cy
        jac = np.zeros((idx.size, 2, 3))
        jac[:, 0, 0] = cam.fx / z_safe
        jac[:, 0, 2] = -cam.fx * t_cam[:, 0] / z_safe ** 2
        jac[:, 1, 1] = cam.fy / z_safe
        jac[:, 1, 2] = -cam.fy * t_cam[:, 1] / z_safe ** 2
        cov2d = np.einsum("nij,njk,nlk->nil", jac, m_cam, jac)
        cov2d[:, 0, 0] += options.lowpass
        cov2d[:, 1, 1] += options.lowpass

        hx = CULL_CONFIDENCE_RADIUS * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
        hy = CULL_CONFIDENCE_RADIUS * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
        on_image = ((u + hx >= 0) & (u - hx <= cam.width)
                    & (v + hy >= 0) & (v - hy <= cam.height))
        keep = in_front & on_image

        # Compress to the surviving subset; grid indices keep tie-breaks stable.
        self.grid_indices = idx[keep]
        self.offsets = offsets[keep]
        self.qhat = qhat[keep]
        self.qnorm = qnorm[keep]
        self.rot = rot[keep]
        self.var = var[keep]
        self.m_cam = m_cam[keep]
        self.t_cam = t_cam[keep]
        self.jac = jac[keep]
        self.cov2d = cov2d[keep]
        self.mean2d = np.stack([u[keep], v[keep]], axis=1)
        self.depth = z[keep]
        self.opacity = 1.0 / (1.0 + np.exp(-logits[keep]))
        self.logits = logits[keep]
        self.colors = np.ascontiguousarray(colors[keep])

        det = (self.cov2d[:, 0, 0] * self.cov2d[:, 1, 1]
               - self.cov2d[:, 0, 1] * self.cov2d[:, 1, 0])
        self.conic = np.empty((self.depth.size, 3))
        self.conic[:, 0] = self.cov2d[:, 1, 1] / det
        self.conic[:, 1] = -self.cov2d[:, 0, 1] / det
        self.conic[:, 2] = self.cov2d[:, 0, 0] / det
        # Radius beyond which the exp argument is guaranteed below the kernel
        # cutoff, so distant pixels can skip the quadratic form entirely.
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        self.rcut = np.sqrt(2.0 * -_kernels.POWER_CUTOFF * lam_max)

        self._bin_pairs()

    def _bin_pairs(self) -> None:
        cam, options = self.cam, self.options
        tile = options.tile_size
        self.tiles_x = (cam.width + tile - 1) // tile
        self.tiles_y = (cam.height + tile - 1) // tile
        self.n_tiles = self.tiles_x * self.tiles_y
        m = self.depth.size
        if m == 0:
            self.pair_splat = np.zeros(0, dtype=np.int64)
            self.tile_start = np.zeros(self.n_tiles + 1, dtype=np.int64)
            return
        hx = options.bin_sigma * np.sqrt(self.cov2d[:, 0, 0])
        hy = options.bin_sigma * np.sqrt(self.cov2d[:, 1, 1])
        u, v = self.mean2d[:, 0], self.mean2d[:, 1]
        tx0 = np.clip(np.floor((u - hx) / tile).astype(np.int64), 0, self.tiles_x - 1)
        tx1 = np.clip(np.floor((u + hx) / tile).astype(np.int64), 0, self.tiles_x - 1)
        ty0 = np.clip(np.floor((v - hy) / tile).astype(np.int64), 0, self.tiles_y - 1)
        ty1 = np.clip(np.floor((v + hy) / tile).astype(np.int64), 0, self.tiles_y - 1)
        nx = tx1 - tx0 + 1
        counts = nx * (ty1 - ty0 + 1)
        total = int(counts.sum())
        splat = np.repeat(np.arange(m, dtype=np.int64), counts)
        local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        nx_rep = np.repeat(nx, counts)
        ptx = np.repeat(tx0, counts) + local % nx_rep
        pty = np.repeat(ty0, counts) + local // nx_rep
        tile_id = pty * self.tiles_x + ptx

        order = np.lexsort((self.grid_indices, self.depth))
        rank = np.empty(m, dtype=np.int64)
        rank[order] = np.arange(m)
        pair_order = np.lexsort((rank[splat], tile_id))
        self.pair_splat = np.ascontiguousarray(splat[pair_order])
        tile_sorted = tile_id[pair_order]
        self.tile_start = np.searchsorted(
            tile_sorted, np.arange(self.n_tiles + 1)).astype(np.int64)


def render(volume: GaussianVolume, cam: Camera, background, *,
           options: RenderOptions = DEFAULT_OPTIONS, parallel: bool = False) -> ImageBuffer:
    """Rasterize the active Gaussians into an RGB + transmittance buffer."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    view = _View(volume, cam, options)
    rgb = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    if view.pair_splat.size:
        kernel = _kernels.forward_parallel if parallel else _kernels.forward_serial
        kernel(view.n_tiles, view.tiles_x, options.tile_size, cam.width, cam.height,
               view.tile_start, view.pair_splat, view.mean2d, view.conic,
               view.rcut, view.opacity, view.colors, rgb, trans)
    rgb += trans[:, :, None] * background
    return ImageBuffer(width=cam.width, height=cam.height, rgb=rgb, transmittance=trans)


def render_backward(volume: GaussianVolume, cam: Camera, background,
                    upstream: np.ndarray, *, options: RenderOptions = DEFAULT_OPTIONS,
                    parallel: bool = False) -> GradientBuffer:
    """Partials of the scalar loss whose image gradient is ``upstream``.

    Recomputes the forward blending state per tile rather than requiring a
    stored context; ``upstream`` must match the camera's image shape.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise RenderStateError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"camera image {(cam.height, cam.width, 3)}")
    view = _View(volume, cam, options)
    buf = GradientBuffer.zeros(volume.n_points)
    m = view.depth.size
    if m == 0:
        return buf
    buf.visible[view.grid_indices] = True
    total = view.pair_splat.size

    g_mean2d_pair = np.zeros((total, 2))
    g_conic_pair = np.zeros((total, 3))
    g_opac_pair = np.zeros(total)
    g_color_pair = np.zeros((total, 3))
    kernel = _kernels.backward_parallel if parallel else _kernels.backward_serial
    kernel(view.n_tiles, view.tiles_x, options.tile_size, cam.width, cam.height,
           view.tile_start, view.pair_splat, view.mean2d, view.conic,
           view.rcut, view.opacity, view.colors, upstream, background,
           g_mean2d_pair, g_conic_pair, g_opac_pair, g_color_pair)

    def reduce(values: np.ndarray) -> np.ndarray:
        return np.bincount(view.pair_splat, weights=values, minlength=m)

    g_mean2d = np.stack([reduce(g_mean2d_pair[:, 0]), reduce(g_mean2d_pair[:, 1])], axis=1)
    g_conic = np.stack([reduce(g_conic_pair[:, k]) for k in range(3)], axis=1)
    g_opac = reduce(g_opac_pair)
    g_color = np.stack([reduce(g_color_pair[:, k]) for k in range(3)], axis=1)

    # conic -> cov2d through the 2x2 inverse.
    lam = np.empty((m, 2, 2))
    lam[:, 0, 0] = view.conic[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = view.conic[:, 1]
    lam[:, 1, 1] = view.conic[:, 2]
    g_lam = np.empty((m, 2, 2))
    g_lam[:, 0, 0] = g_conic[:, 0]
    g_lam[:, 0, 1] = g_lam[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_lam[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", lam, g_lam, lam)

    # cov2d = J M J^T: pull back onto the Jacobian and the camera-space cov.
    g_jac = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, view.jac, view.m_cam)
    g_mcam = np.einsum("nji,njk,nkl->nil", view.jac, g_cov2d, view.jac)
    w = cam.rotation
    g_sigma = np.einsum("ji,njk,kl->nil", w, g_mcam, w)

    # Screen position and Jacobian entries -> camera-space point.
    fx, fy = cam.fx, cam.fy
    x, y, z = view.t_cam[:, 0], view.t_cam[:, 1], view.t_cam[:, 2]
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    g_tcam = np.empty((m, 3))
    g_tcam[:, 0] = gu * fx / z - g_jac[:, 0, 2] * fx / z ** 2
    g_tcam[:, 1] = gv * fy / z - g_jac[:, 1, 2] * fy / z ** 2
    g_tcam[:, 2] = (-gu * fx * x / z ** 2 - gv * fy * y / z ** 2
                    - g_jac[:, 0, 0] * fx / z ** 2
                    + g_jac[:, 0, 2] * 2.0 * fx * x / z ** 3
                    - g_jac[:, 1, 1] * fy / z ** 2
                    + g_jac[:, 1, 2] * 2.0 * fy * y / z ** 3)
    g_offset = g_tcam @ w  # = W^T g contracted along rows

    # Sigma = R diag(var) R^T -> log scales and quaternion.
    rtgr = np.einsum("nji,njk,nkl->nil", view.rot, g_sigma, view.rot)
    g_var = np.stack([rtgr[:, 0, 0], rtgr[:, 1, 1], rtgr[:, 2, 2]], axis=1)
    g_log_scale = g_var * 2.0 * view.var
    g_rotmat = 2.0 * np.einsum("nij,njk->nik", g_sigma, view.rot) * view.var[:, None, :]
    g_qhat = rotation_gradient_to_quaternion(view.qhat, g_rotmat)
    g_quat = (g_qhat - view.qhat * np.sum(view.qhat * g_qhat, axis=1, keepdims=True)) \
        / view.qnorm[:, None]

    op = view.opacity
    g_logit = g_opac * op * (1.0 - op)

    idx = view.grid_indices
    buf.offset[idx] = g_offset
    buf.log_scale[idx] = g_log_scale
    buf.rotation[idx] = g_quat
    buf.opacity_logit[idx] = g_logit
    buf.color[idx] = g_color
    buf.viewspace_grad_norm[idx] = np.hypot(gu, gv)
    return buf
