import math

import numpy as np
import pytest

import splatvol as sv
from splatvol.errors import DegenerateRotationError
from splatvol.projection import quaternion_to_rotation


def test_covariance3d_identity():
    sigma = sv.covariance3d(np.zeros(3), np.array([1, 0, 0, 0]))
    assert np.allclose(sigma, np.eye(3))


def test_covariance3d_axis_aligned():
    sigma = sv.covariance3d(np.array([math.log(2), 0, 0]), np.array([1, 0, 0, 0]))
    assert np.allclose(sigma, np.diag([4, 1, 1]))


def test_covariance3d_rotated():
    # 90 degrees about z maps the long axis from x onto y; expected matrix
    # computed as the explicit product R S S^T R^T.
    angle = math.pi / 2
    quat = np.array([math.cos(angle / 2), 0, 0, math.sin(angle / 2)])
    log_scale = np.array([math.log(2), 0, 0])
    rot = quaternion_to_rotation(quat)
    expected = rot @ np.diag([4, 1, 1]) @ rot.T
    sigma = sv.covariance3d(log_scale, quat)
    assert np.allclose(sigma, expected)
    assert np.allclose(sigma, np.diag([1, 4, 1]), atol=1e-12)


def test_covariance3d_unnormalized_quaternion():
    a = sv.covariance3d(np.array([0.2, -0.1, 0.4]), np.array([0.3, 0.5, -0.2, 0.7]))
    b = sv.covariance3d(np.array([0.2, -0.1, 0.4]),
                        3.7 * np.array([0.3, 0.5, -0.2, 0.7]))
    assert np.allclose(a, b)
    assert np.allclose(a, a.T)
    assert np.all(np.linalg.eigvalsh(a) > 0)


def test_covariance3d_degenerate_rotation():
    with pytest.raises(DegenerateRotationError):
        sv.covariance3d(np.zeros(3), np.zeros(4))


def _front_camera(width=64, height=64, f=100.0):
    return sv.Camera(width=width, height=height, fx=f, fy=f,
                     cx=width / 2, cy=height / 2,
                     rotation=np.eye(3), translation=np.zeros(3))


def test_project_principal_point():
    cam = _front_camera()
    splat = sv.project(np.array([0, 0, 2.0]), 0.01 * np.eye(3), cam)
    assert splat is not None
    assert np.allclose(splat.mean2d, [cam.cx, cam.cy])
    assert splat.depth == pytest.approx(2.0)


def test_project_axial_covariance():
    # On-axis, Sigma = s^2 I maps to (f^2 s^2 / d^2) I plus the low-pass term.
    cam = _front_camera(f=120.0)
    s2, d = 0.03, 2.5
    splat = sv.project(np.array([0, 0, d]), s2 * np.eye(3), cam, lowpass=0.3)
    expected = (120.0 ** 2 * s2 / d ** 2) * np.eye(2) + 0.3 * np.eye(2)
    assert np.allclose(splat.cov2d, expected)


def test_project_culls_behind_near_plane():
    cam = _front_camera()
    assert sv.project(np.array([0, 0, -1.0]), np.eye(3) * 0.01, cam) is None
    assert sv.project(np.array([0, 0, 0.005]), np.eye(3) * 0.01, cam, near=0.01) is None


def test_project_culls_far_off_image():
    cam = _front_camera()
    # Tiny splat far outside the frustum: its 99% ellipse misses the image.
    assert sv.project(np.array([50.0, 0, 2.0]), 1e-6 * np.eye(3), cam) is None


def test_project_keeps_border_overlap():
    cam = _front_camera()
    # A broad splat centered off-image still overlaps it at 99% confidence.
    splat = sv.project(np.array([1.5, 0, 2.0]), 0.2 * np.eye(3), cam)
    assert splat is not None
