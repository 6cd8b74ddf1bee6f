"""Perspective projection of 3D Gaussians to screen-space splats.

World-space covariances follow the ellipsoid factorization
``Sigma = R S S^T R^T`` with S the diagonal of the activated scales and R
the rotation of the normalized stored quaternion.  Screen-space
covariances use the local affine (EWA) approximation
``cov2d = J W Sigma W^T J^T`` with W the world-to-camera rotation and J the
Jacobian of the pinhole projection at the splat center, plus a small
diagonal low-pass term that keeps every splat at least a pixel wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotationError
from .model import Camera

# 99% confidence radius of a 2D Gaussian: P(d^2 <= r^2) = 1 - exp(-r^2/2).
CULL_CONFIDENCE_RADIUS = float(np.sqrt(-2.0 * np.log(0.01)))

_QUAT_NORM_EPS = 1e-12


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance3d(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """World covariance ``R S S^T R^T`` from log scales and a raw quaternion."""
    q = np.asarray(rotation, dtype=np.float64).reshape(4)
    norm = float(np.linalg.norm(q))
    if norm <= _QUAT_NORM_EPS:
        raise DegenerateRotationError(f"quaternion norm {norm} is not normalizable")
    rot = quaternion_to_rotation(q / norm)
    var = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64).reshape(3))
    return rot @ np.diag(var) @ rot.T


@dataclass
class ProjectedSplat:
    """A Gaussian after projection to the image plane."""

    mean2d: np.ndarray           # (2,) pixels
    cov2d: np.ndarray            # (2, 2) pixels^2, low-pass already added
    depth: float                 # camera-space z
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity: float = 0.0
    source_index: int = -1


def project(mu: np.ndarray, cov3: np.ndarray, cam: Camera, *,
            near: float = 0.01, lowpass: float = 0.3) -> ProjectedSplat | None:
    """Project one Gaussian; returns None when culled (behind the near plane
    or with its 99%-confidence ellipse entirely off the image)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(3)
    t_cam = cam.rotation @ mu + cam.translation
    x, y, z = t_cam
    if z <= near:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    jac = np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])
    cov_cam = cam.rotation @ np.asarray(cov3, dtype=np.float64) @ cam.rotation.T
    cov2d = jac @ cov_cam @ jac.T + lowpass * np.eye(2)
    hx = CULL_CONFIDENCE_RADIUS * np.sqrt(cov2d[0, 0])
    hy = CULL_CONFIDENCE_RADIUS * np.sqrt(cov2d[1, 1])
    if u + hx < 0 or u - hx > cam.width or v + hy < 0 or v - hy > cam.height:
        return None
    return ProjectedSplat(mean2d=np.array([u, v]), cov2d=cov2d, depth=float(z))


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """(M, 4) unit quaternions -> (M, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rotation_gradient_to_quaternion(q: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Chain (M, 3, 3) rotation-matrix gradients back onto unit quaternions.

    Returns dL/dq_hat; normalization back to the raw quaternion is the
    caller's job.
    """
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_rot
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)
