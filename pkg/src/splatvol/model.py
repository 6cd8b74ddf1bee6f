"""Core data model: the grid-anchored Gaussian volume, cameras, image buffers.

A volume stores exactly ``N**3`` Gaussians, one per lattice point, in
lexicographic grid order with the z coordinate varying fastest.  Each point
carries 14 channels: a 3-vector position offset relative to its lattice
point, a 3-vector log scale, a 4-vector quaternion (w, x, y, z, stored
unnormalized), an opacity logit, and a 3-vector color.  Attributes are kept
as struct-of-arrays (float32) so the renderer and optimizer can work on
whole channels at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateRotationError, ShapeError

ATTRIBUTE_CHANNELS = 14  # 3 offset + 3 log_scale + 4 rotation + 1 opacity + 3 color

_QUAT_NORM_EPS = 1e-12


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned box in world units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))
        if not np.all(self.hi > self.lo):
            raise ConfigError(f"bounds must satisfy hi > lo per axis, got lo={self.lo} hi={self.hi}")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def spacing(self, resolution: int) -> np.ndarray:
        """Lattice spacing per axis for an N-point grid spanning the box."""
        if resolution < 2:
            raise ConfigError(f"resolution must be >= 2, got {resolution}")
        return self.extent / (resolution - 1)


def default_bounds() -> Bounds:
    """The unit object box [-1, 1]^3 used throughout the toolkit."""
    return Bounds(lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0))


def grid_coords(index: int, resolution: int) -> tuple[int, int, int]:
    """Decompose a flat index into (ix, iy, iz), z fastest."""
    n = resolution
    iz = index % n
    iy = (index // n) % n
    ix = index // (n * n)
    return ix, iy, iz


def grid_index(ix: int, iy: int, iz: int, resolution: int) -> int:
    n = resolution
    return (ix * n + iy) * n + iz


@dataclass(frozen=True)
class GaussianAttributes:
    """Raw (pre-activation) attributes of one Gaussian."""

    offset: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))


def activate(attrs: GaussianAttributes) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Map stored attributes to their rendering-time values.

    Returns (scale, unit quaternion, opacity, color): scale is exp of the
    stored log scale, the quaternion is normalized, opacity is the sigmoid
    of the stored logit, and color passes through unchanged.
    """
    norm = float(np.linalg.norm(attrs.rotation))
    if norm <= _QUAT_NORM_EPS:
        raise DegenerateRotationError(f"quaternion norm {norm} is not normalizable")
    scale = np.exp(attrs.log_scale)
    quat = attrs.rotation / norm
    opacity = 1.0 / (1.0 + math.exp(-attrs.opacity_logit))
    return scale, quat, opacity, attrs.color.copy()


@dataclass
class GaussianVolume:
    """A fixed lattice of ``resolution**3`` Gaussians anchored to grid points.

    ``active_mask`` marks the points that take part in rendering and
    optimization; the complement lives in a :class:`CandidatePool` during
    fitting so that active count + pool size always equals ``resolution**3``.
    """

    resolution: int
    bounds: Bounds
    offsets: np.ndarray          # (K, 3) float32
    log_scales: np.ndarray       # (K, 3) float32
    rotations: np.ndarray        # (K, 4) float32, (w, x, y, z)
    opacity_logits: np.ndarray   # (K,)  float32
    colors: np.ndarray           # (K, 3) float32
    active_mask: np.ndarray      # (K,)  bool

    def __post_init__(self):
        k = self.n_points
        shapes = {
            "offsets": (k, 3), "log_scales": (k, 3), "rotations": (k, 4),
            "opacity_logits": (k,), "colors": (k, 3), "active_mask": (k,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want}")

    @property
    def n_points(self) -> int:
        return self.resolution ** 3

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.active_mask))

    def point(self, index: int) -> GaussianAttributes:
        if not 0 <= index < self.n_points:
            raise IndexError(f"grid index {index} out of range [0, {self.n_points})")
        return GaussianAttributes(
            offset=self.offsets[index],
            log_scale=self.log_scales[index],
            rotation=self.rotations[index],
            opacity_logit=float(self.opacity_logits[index]),
            color=self.colors[index],
        )

    def grid_positions(self) -> np.ndarray:
        """(K, 3) lattice point positions in storage order."""
        n = self.resolution
        axes = [np.linspace(self.bounds.lo[a], self.bounds.hi[a], n) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def centers(self) -> np.ndarray:
        """(K, 3) Gaussian centers: lattice point plus stored offset."""
        return self.grid_positions() + self.offsets.astype(np.float64)

    def activated_opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def channel_matrix(self) -> np.ndarray:
        """(K, 14) float32 channel layout used by the binary volume format."""
        return np.concatenate(
            [self.offsets, self.log_scales, self.rotations,
             self.opacity_logits[:, None], self.colors], axis=1,
        ).astype(np.float32)

    def copy(self) -> "GaussianVolume":
        return GaussianVolume(
            resolution=self.resolution,
            bounds=self.bounds,
            offsets=self.offsets.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            active_mask=self.active_mask.copy(),
        )


def volume_from_channels(resolution: int, bounds: Bounds, channels: np.ndarray,
                         active_mask: np.ndarray) -> GaussianVolume:
    """Inverse of :meth:`GaussianVolume.channel_matrix`."""
    k = resolution ** 3
    channels = np.asarray(channels, dtype=np.float32)
    if channels.shape != (k, ATTRIBUTE_CHANNELS):
        raise ShapeError(f"channel matrix has shape {channels.shape}, expected {(k, ATTRIBUTE_CHANNELS)}")
    return GaussianVolume(
        resolution=resolution,
        bounds=bounds,
        offsets=channels[:, 0:3].copy(),
        log_scales=channels[:, 3:6].copy(),
        rotations=channels[:, 6:10].copy(),
        opacity_logits=channels[:, 10].copy(),
        colors=channels[:, 11:14].copy(),
        active_mask=np.asarray(active_mask, dtype=bool).reshape(k).copy(),
    )


def grid_position(index: int, volume: GaussianVolume) -> np.ndarray:
    """World position of the lattice point behind a flat grid index."""
    if not 0 <= index < volume.n_points:
        raise IndexError(f"grid index {index} out of range [0, {volume.n_points})")
    ix, iy, iz = grid_coords(index, volume.resolution)
    spacing = volume.bounds.spacing(volume.resolution)
    return volume.bounds.lo + spacing * np.array([ix, iy, iz], dtype=np.float64)


def gaussian_center(attrs: GaussianAttributes, p: np.ndarray) -> np.ndarray:
    """Center of a Gaussian: assigned lattice position plus its offset."""
    return np.asarray(p, dtype=np.float64).reshape(3) + attrs.offset


class CandidatePool:
    """Set of deactivated grid indices parked during refinement."""

    def __init__(self, deactivated=()):
        self.deactivated: set[int] = set(int(i) for i in deactivated)

    def __len__(self) -> int:
        return len(self.deactivated)

    def __contains__(self, index: int) -> bool:
        return int(index) in self.deactivated

    def add(self, indices) -> None:
        self.deactivated.update(int(i) for i in np.atleast_1d(indices))

    def remove(self, indices) -> None:
        for i in np.atleast_1d(indices):
            self.deactivated.discard(int(i))

    def as_array(self) -> np.ndarray:
        return np.array(sorted(self.deactivated), dtype=np.int64)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation @ x + translation`` maps world points into a
    frame with x right, y down, and the optical axis along +z."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera rotation
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ConfigError(f"camera rotation is not orthonormal (|R R^T - I| = {err:.2e})")
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *,
                width: int, height: int, fov_x: float) -> "Camera":
        """Camera at ``eye`` whose optical axis points at ``target``.

        ``fov_x`` is the full horizontal field of view in radians; fy = fx
        (square pixels) and the principal point sits at the image center.
        """
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        dist = np.linalg.norm(forward)
        if dist == 0:
            raise ConfigError("look_at eye and target coincide")
        z_c = forward / dist
        up = np.asarray(up, dtype=np.float64)
        x_c = np.cross(z_c, up)
        if np.linalg.norm(x_c) < 1e-8:  # looking straight along the up axis
            x_c = np.cross(z_c, np.array([1.0, 0.0, 0.0]))
        x_c = x_c / np.linalg.norm(x_c)
        y_c = np.cross(z_c, x_c)
        rot = np.stack([x_c, y_c, z_c], axis=0)
        fx = 0.5 * width / math.tan(0.5 * fov_x)
        return Camera(
            width=width, height=height, fx=fx, fy=fx,
            cx=width / 2.0, cy=height / 2.0,
            rotation=rot, translation=-rot @ eye,
        )


@dataclass
class ImageBuffer:
    """Rendered RGB radiance plus the leftover transmittance per pixel."""

    width: int
    height: int
    rgb: np.ndarray            # (H, W, 3)
    transmittance: np.ndarray  # (H, W)

    def __post_init__(self):
        if self.rgb.shape != (self.height, self.width, 3):
            raise ShapeError(f"rgb shape {self.rgb.shape} != {(self.height, self.width, 3)}")
        if self.transmittance.shape != (self.height, self.width):
            raise ShapeError("transmittance shape does not match image dims")


@dataclass
class ViewSet:
    """Posed multi-view images plus the shared rendering context."""

    cameras: list[Camera]
    images: list[np.ndarray]   # each (H, W, 3) linear radiance in [0, 1]
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    bounds: Bounds = field(default_factory=default_bounds)

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if len(self.cameras) != len(self.images):
            raise ShapeError("cameras and images must pair up one-to-one")
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ShapeError(
                    f"image shape {img.shape} does not match camera {(cam.height, cam.width, 3)}")

    def __len__(self) -> int:
        return len(self.cameras)
