"""Shared test utilities: an independent reference compositor and
finite-difference helpers."""

import math

import numpy as np

import splatvol as sv
from splatvol.projection import quaternion_to_rotation


def reference_render(volume, cam, background, near=0.01, lowpass=0.3):
    """Cutoff-free per-pixel compositor, written independently of the tiled
    rasterizer.  Composites every active, non-culled splat front to back with
    the 0.99 alpha clamp and the 1e-4 termination rule.  Intended for scenes
    whose splats project well inside the image."""
    background = np.asarray(background, dtype=np.float64)
    idx = np.nonzero(volume.active_mask)[0]
    splats = []
    positions = volume.grid_positions()
    for i in idx:
        attrs = volume.point(int(i))
        scale, quat, opacity, color = sv.activate(attrs)
        rot = quaternion_to_rotation(quat)
        cov3 = rot @ np.diag(scale ** 2) @ rot.T
        mu = positions[i] + attrs.offset
        t_cam = cam.rotation @ mu + cam.translation
        if t_cam[2] <= near:
            continue
        x, y, z = t_cam
        mean = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                        [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
        cov2 = jac @ cam.rotation @ cov3 @ cam.rotation.T @ jac.T + lowpass * np.eye(2)
        conic = np.linalg.inv(cov2)
        splats.append((z, int(i), mean, conic, opacity, color))
    splats.sort(key=lambda s: (s[0], s[1]))

    rgb = np.zeros((cam.height, cam.width, 3))
    trans_out = np.ones((cam.height, cam.width))
    for py in range(cam.height):
        for px in range(cam.width):
            pix = np.array([px + 0.5, py + 0.5])
            trans = 1.0
            color_acc = np.zeros(3)
            for _, _, mean, conic, opacity, color in splats:
                d = pix - mean
                alpha = min(opacity * math.exp(-0.5 * d @ conic @ d), 0.99)
                test_t = trans * (1.0 - alpha)
                if test_t < 1e-4:
                    break
                color_acc += color * alpha * trans
                trans = test_t
            rgb[py, px] = color_acc + trans * background
            trans_out[py, px] = trans
    return rgb, trans_out


def random_volume(rng, resolution=2, n_active=5, scale_range=(0.1, 0.45),
                  logit_range=(-3.0, 2.0)):
    """Well-conditioned random volume for gradient checks: splats at least
    about a pixel wide and opacities away from the 0.99 clamp."""
    vol, _ = sv.initialize(resolution)
    k = vol.n_points
    vol.offsets[:] = rng.uniform(-0.4, 0.4, (k, 3)).astype(np.float32)
    vol.log_scales[:] = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]),
                                    (k, 3)).astype(np.float32)
    vol.rotations[:] = rng.normal(size=(k, 4)).astype(np.float32)
    vol.opacity_logits[:] = rng.uniform(*logit_range, k).astype(np.float32)
    vol.colors[:] = rng.uniform(0.0, 1.0, (k, 3)).astype(np.float32)
    mask = np.zeros(k, dtype=bool)
    mask[rng.choice(k, size=min(n_active, k), replace=False)] = True
    vol.active_mask[:] = mask
    return vol


def orbit_camera(rng, width=32, height=32, radius_range=(1.9, 2.6), fov=1.2):
    eye = rng.normal(size=3)
    eye = eye / np.linalg.norm(eye) * rng.uniform(*radius_range)
    return sv.Camera.look_at(eye, width=width, height=height, fov_x=fov)


def fd_attribute_gradient(volume, arr, index, loss_fn, step=1e-3):
    """Central difference through float32 storage; divides by the realized
    step so storage rounding cancels."""
    orig = arr[index]
    arr[index] = np.float32(orig + step)
    hi = loss_fn(volume)
    hi_val = float(np.float64(arr[index]))
    arr[index] = np.float32(orig - step)
    lo = loss_fn(volume)
    lo_val = float(np.float64(arr[index]))
    arr[index] = orig
    return (hi - lo) / (hi_val - lo_val)


def rel_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
