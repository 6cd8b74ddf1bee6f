"""Synthetic ground-truth scenes and posed datasets rendered by the toolkit
itself, for closed-loop verification of the fitting pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fitting import initialize
from .model import Camera, GaussianVolume, ViewSet, default_bounds
from .render import DEFAULT_OPTIONS, RenderOptions, render

PLACEMENTS = ("random-in-sphere", "shell", "lattice-subset")
COLOR_SCHEMES = ("random", "position")

_INVISIBLE_LOGIT = math.log(1e-6 / (1.0 - 1e-6))


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a deterministic synthetic scene.

    ``gaussian_count`` points are made visible; the rest of the lattice is
    filled with fully transparent placeholders so the result is a regular,
    fully active volume.  Scale bounds are world-space standard deviations.
    """

    seed: int = 0
    gaussian_count: int = 100
    placement: str = "random-in-sphere"
    color_scheme: str = "random"
    opacity_range: tuple[float, float] = (0.6, 0.95)
    scale_range: tuple[float, float] = (0.04, 0.10)
    placement_radius: float = 0.6
    shell_radii: tuple[float, float] = (0.45, 0.6)
    resolution: int | None = None

    def __post_init__(self):
        if self.gaussian_count < 1:
            raise ConfigError("gaussian_count must be >= 1")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement '{self.placement}'")
        if self.color_scheme not in COLOR_SCHEMES:
            raise ConfigError(f"unknown color scheme '{self.color_scheme}'")
        lo, hi = self.opacity_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("opacity_range must lie strictly inside (0, 1)")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ConfigError("scale_range must be positive")
        if self.resolution is not None and self.resolution ** 3 < self.gaussian_count:
            raise ConfigError("resolution^3 must be >= gaussian_count")


def _scene_resolution(spec: SceneSpec) -> int:
    if spec.resolution is not None:
        if spec.resolution ** 3 < spec.gaussian_count:
            raise ConfigError("resolution^3 must be >= gaussian_count")
        return spec.resolution
    n = 2
    while n ** 3 < spec.gaussian_count:
        n += 1
    return n


def make_scene(spec: SceneSpec) -> GaussianVolume:
    """Deterministic fully active volume with ``gaussian_count`` visible
    Gaussians placed per the spec; all centers stay inside the bounds."""
    n = _scene_resolution(spec)
    volume, _ = initialize(n, default_bounds())
    rng = np.random.default_rng(spec.seed)
    k = volume.n_points
    count = spec.gaussian_count

    chosen = np.sort(rng.choice(k, size=count, replace=False))
    positions = volume.grid_positions()

    if spec.placement == "lattice-subset":
        targets = positions[chosen]
    else:
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        if spec.placement == "random-in-sphere":
            radii = spec.placement_radius * rng.uniform(size=count) ** (1.0 / 3.0)
        else:
            r0, r1 = spec.shell_radii
            radii = rng.uniform(r0, r1, size=count)
        targets = dirs * radii[:, None]

    if spec.color_scheme == "position":
        colors = np.clip((targets - volume.bounds.lo) / volume.bounds.extent, 0.0, 1.0)
    else:
        colors = rng.uniform(0.05, 0.95, size=(count, 3))

    opac = rng.uniform(*spec.opacity_range, size=count)
    scales = rng.uniform(*spec.scale_range, size=(count, 3))
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    volume.opacity_logits[:] = _INVISIBLE_LOGIT
    volume.offsets[chosen] = (targets - positions[chosen]).astype(np.float32)
    volume.colors[chosen] = colors.astype(np.float32)
    volume.opacity_logits[chosen] = np.log(opac / (1.0 - opac)).astype(np.float32)
    volume.log_scales[chosen] = np.log(scales).astype(np.float32)
    volume.rotations[chosen] = quats.astype(np.float32)
    return volume


def fibonacci_sphere(count: int) -> np.ndarray:
    """(count, 3) roughly uniform unit directions."""
    i = np.arange(count, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / count
    phi = 2.0 * math.pi * i * (1.0 - 1.0 / ((1.0 + math.sqrt(5.0)) / 2.0))
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_cameras(view_count: int, radius: float, resolution: int, *,
                   fov_deg: float = 60.0) -> list[Camera]:
    """Cameras on a Fibonacci sphere, all looking at the world origin."""
    if view_count < 1:
        raise ConfigError("view_count must be >= 1")
    dirs = fibonacci_sphere(view_count)
    fov = math.radians(fov_deg)
    return [Camera.look_at(radius * d, width=resolution, height=resolution, fov_x=fov)
            for d in dirs]


def render_dataset(scene: GaussianVolume, view_count: int, radius: float,
                   resolution: int, *, fov_deg: float = 60.0,
                   background=(1.0, 1.0, 1.0),
                   options: RenderOptions = DEFAULT_OPTIONS,
                   parallel: bool = False,
                   out_dir=None) -> ViewSet:
    """Render the scene from uniformly distributed poses at the given
    distance.  With ``out_dir`` the dataset is also written in the on-disk
    manifest format."""
    cameras = sphere_cameras(view_count, radius, resolution, fov_deg=fov_deg)
    images = [render(scene, cam, background, options=options, parallel=parallel).rgb
              for cam in cameras]
    dataset = ViewSet(cameras=cameras, images=images,
                      background=np.asarray(background, dtype=np.float64),
                      bounds=scene.bounds)
    if out_dir is not None:
        from .io import write_dataset
        write_dataset(out_dir, dataset)
    return dataset
