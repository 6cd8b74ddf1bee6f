"""Volume fitting: Adam on all attribute channels plus the candidate-pool
refinement loop.

The point count never changes.  Pruning parks low-opacity points in a pool
of deactivated grid indices; densification pulls the pooled point nearest a
high-gradient Gaussian back out and clones the attributes onto it; at the
end of the refinement window every pooled point is released back into the
optimization.  ``active count + pool size == resolution**3`` holds at every
step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, FitDivergedError, OptimizerError
from .losses import LossWeights, default_epsilon_offsets, fitting_loss, image_terms
from .model import Bounds, CandidatePool, GaussianVolume, ViewSet, default_bounds
from .render import DEFAULT_OPTIONS, GradientBuffer, RenderOptions, render, render_backward

ADAM_CHANNELS = ("offset", "log_scale", "rotation", "opacity_logit", "color")

INIT_OPACITY = 0.1
RELEASE_OPACITY = 0.01


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class LearningRates:
    """Per-channel Adam step sizes."""

    offset: float = 2e-4
    log_scale: float = 5e-3
    rotation: float = 1e-3
    opacity_logit: float = 5e-2
    color: float = 5e-3

    def __post_init__(self):
        for name in ADAM_CHANNELS:
            if getattr(self, name) <= 0:
                raise ConfigError(f"learning rate {name} must be > 0")


@dataclass(frozen=True)
class FitConfig:
    """Everything :func:`fit` needs besides the dataset itself."""

    total_iters: int
    resolution: int = 32
    refine_interval: int = 100
    refine_start: int = 500
    refine_end: int | None = None      # defaults to 0.8 * total_iters
    prune_opacity: float = 0.01        # tau_p
    densify_grad: float = 1e-5         # tau_d, on mean view-space norms
    lr: LearningRates = field(default_factory=LearningRates)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    weights: LossWeights = field(default_factory=LossWeights)
    pool_radius: float | None = None   # defaults to 2 voxel spacings
    seed: int = 0
    use_cps: bool = True
    optimize_offsets: bool = True
    # Fitting renders with a tighter binning radius than the conservative
    # default; the dropped tail contributions sit below 4e-4 per splat.
    render_options: RenderOptions = field(default_factory=lambda: RenderOptions(bin_sigma=4.0))
    parallel: bool = False

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.resolution < 2:
            raise ConfigError("resolution must be >= 2")
        if self.refine_interval < 1 or self.refine_start < 1:
            raise ConfigError("refinement schedule values must be >= 1")
        if self.refine_end is not None and self.refine_end < self.refine_start:
            raise ConfigError("refine_end must be >= refine_start")
        if self.refine_end is not None and self.refine_end > self.total_iters:
            raise ConfigError("refine_end must be <= total_iters so the pool is released")
        # prune_opacity 0 and densify_grad inf disable refinement gracefully.
        if self.prune_opacity < 0 or self.densify_grad <= 0:
            raise ConfigError("thresholds must be nonnegative / positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam constants")

    def resolved_refine_end(self) -> int:
        if self.refine_end is not None:
            return self.refine_end
        return int(0.8 * self.total_iters)


@dataclass
class AdamState:
    """First/second moment accumulators per attribute channel."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def zeros(n_points: int) -> "AdamState":
        shapes = {"offset": (n_points, 3), "log_scale": (n_points, 3),
                  "rotation": (n_points, 4), "opacity_logit": (n_points,),
                  "color": (n_points, 3)}
        return AdamState(
            step=0,
            m={k: np.zeros(s) for k, s in shapes.items()},
            v={k: np.zeros(s) for k, s in shapes.items()},
        )

    def reset_indices(self, indices) -> None:
        for k in ADAM_CHANNELS:
            self.m[k][indices] = 0.0
            self.v[k][indices] = 0.0


def initialize(resolution: int, bounds: Bounds | None = None) -> tuple[GaussianVolume, CandidatePool]:
    """Fresh volume: every grid point active, centers on the lattice, each
    Gaussian about half a voxel wide, opacity 0.1, mid-gray color."""
    if resolution < 2:
        raise ConfigError(f"resolution must be >= 2, got {resolution}")
    bounds = bounds if bounds is not None else default_bounds()
    k = resolution ** 3
    spacing = bounds.spacing(resolution)
    volume = GaussianVolume(
        resolution=resolution,
        bounds=bounds,
        offsets=np.zeros((k, 3), dtype=np.float32),
        log_scales=np.tile(np.log(spacing / 2.0).astype(np.float32), (k, 1)),
        rotations=np.tile(np.array([1, 0, 0, 0], dtype=np.float32), (k, 1)),
        opacity_logits=np.full(k, _logit(INIT_OPACITY), dtype=np.float32),
        colors=np.full((k, 3), 0.5, dtype=np.float32),
        active_mask=np.ones(k, dtype=bool),
    )
    return volume, CandidatePool()


def adam_step(volume: GaussianVolume, grads: GradientBuffer, state: AdamState,
              cfg: FitConfig) -> tuple[GaussianVolume, AdamState]:
    """One Adam update on every active point; deactivated points stay frozen."""
    params = {"offset": volume.offsets, "log_scale": volume.log_scales,
              "rotation": volume.rotations, "opacity_logit": volume.opacity_logits,
              "color": volume.colors}
    active = volume.active_mask
    inactive = ~active
    for name in ADAM_CHANNELS:
        g = getattr(grads, name)
        if not np.isfinite(g[active]).all():
            raise OptimizerError(f"non-finite gradient on channel '{name}'")
        if inactive.any() and np.any(g[inactive] != 0.0):
            raise ContractError(f"nonzero gradient on deactivated point in channel '{name}'")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name in ADAM_CHANNELS:
        g = getattr(grads, name)[active]
        m = state.m[name]
        v = state.v[name]
        m[active] = cfg.beta1 * m[active] + (1.0 - cfg.beta1) * g
        v[active] = cfg.beta2 * v[active] + (1.0 - cfg.beta2) * g * g
        step = getattr(cfg.lr, name) * (m[active] / bc1) / (np.sqrt(v[active] / bc2) + cfg.adam_eps)
        param = params[name]
        param[active] = (param[active].astype(np.float64) - step).astype(param.dtype)
    return volume, state


def prune_select(volume: GaussianVolume, tau_p: float) -> np.ndarray:
    """Active indices whose activated opacity falls below ``tau_p``."""
    opac = volume.activated_opacities()
    return np.nonzero(volume.active_mask & (opac < tau_p))[0]


def densify_select(volume: GaussianVolume, mean_viewspace_norm: np.ndarray,
                   tau_d: float) -> np.ndarray:
    """Active indices whose mean accumulated view-space gradient norm exceeds
    ``tau_d``."""
    return np.nonzero(volume.active_mask & (mean_viewspace_norm > tau_d))[0]


class ViewspaceAccumulator:
    """Accumulates per-view screen-space gradient norms between refinements."""

    def __init__(self, n_points: int):
        self.norm_sum = np.zeros(n_points)
        self.view_count = np.zeros(n_points, dtype=np.int64)

    def update(self, grads: GradientBuffer) -> None:
        self.norm_sum += grads.viewspace_grad_norm
        self.view_count += grads.visible

    def mean(self) -> np.ndarray:
        return self.norm_sum / np.maximum(self.view_count, 1)

    def reset(self) -> None:
        self.norm_sum[:] = 0.0
        self.view_count[:] = 0


def pool_exchange(volume: GaussianVolume, pool: CandidatePool,
                  prune_idx: np.ndarray, densify_idx: np.ndarray,
                  epsilon_offsets: float, *, pool_radius: float,
                  rng: np.random.Generator) -> list[int]:
    """Deactivate pruned points into the pool, then pull the nearest pooled
    grid point (within ``pool_radius``) back out for each densified point.

    The reactivated point clones the densified point's attributes with
    opacity halved on both, and its offset is set so its center lands near
    the densified center, clamped to ``epsilon_offsets`` per component.
    Densified points with no pooled candidate in range are skipped.
    Returns the activated indices.
    """
    prune_idx = np.asarray(prune_idx, dtype=np.int64).ravel()
    densify_idx = np.asarray(densify_idx, dtype=np.int64).ravel()
    if np.intersect1d(prune_idx, densify_idx).size:
        raise ContractError("prune and densify selections overlap")
    if prune_idx.size and not volume.active_mask[prune_idx].all():
        raise ContractError("pruned indices must be active")
    if densify_idx.size and not volume.active_mask[densify_idx].all():
        raise ContractError("densified indices must be active")

    volume.active_mask[prune_idx] = False
    pool.add(prune_idx)

    activated: list[int] = []
    if densify_idx.size == 0:
        return activated
    positions = volume.grid_positions()
    for d in sorted(int(i) for i in densify_idx):
        pooled = pool.as_array()
        if pooled.size == 0:
            break
        center = positions[d] + volume.offsets[d].astype(np.float64)
        dist = np.linalg.norm(positions[pooled] - center, axis=1)
        best = int(np.argmin(dist))
        if dist[best] > pool_radius:
            continue
        new = int(pooled[best])
        pool.remove([new])
        volume.active_mask[new] = True
        jitter = rng.normal(0.0, 0.1 * epsilon_offsets, 3) if epsilon_offsets > 0 else np.zeros(3)
        offset = np.clip(center + jitter - positions[new], -epsilon_offsets, epsilon_offsets)
        volume.offsets[new] = offset.astype(np.float32)
        volume.log_scales[new] = volume.log_scales[d]
        volume.rotations[new] = volume.rotations[d]
        volume.colors[new] = volume.colors[d]
        half = volume.activated_opacities()[d] / 2.0
        half_logit = np.float32(_logit(max(half, 1e-6)))
        volume.opacity_logits[new] = half_logit
        volume.opacity_logits[d] = half_logit
        activated.append(new)
    return activated


def release_pool(volume: GaussianVolume, pool: CandidatePool) -> np.ndarray:
    """Reactivate every pooled point with zero offset, near-zero opacity and
    the default scale; empties the pool."""
    released = pool.as_array()
    if released.size == 0:
        return released
    spacing = volume.bounds.spacing(volume.resolution)
    volume.active_mask[released] = True
    volume.offsets[released] = 0.0
    volume.opacity_logits[released] = _logit(RELEASE_OPACITY)
    volume.log_scales[released] = np.log(spacing / 2.0).astype(np.float32)
    pool.remove(released)
    return released


@dataclass
class IterationMetrics:
    iteration: int
    loss: float
    psnr: float
    active_count: int


@dataclass
class FitResult:
    volume: GaussianVolume
    pool: CandidatePool
    metrics: list[IterationMetrics]


def fit(dataset: ViewSet, cfg: FitConfig, *, on_iteration=None, on_refine=None) -> FitResult:
    """Optimize a fresh volume against posed images.

    Views are visited round-robin in a seeded shuffled order, reshuffled
    each epoch.  Refinement (prune into pool, densify out of pool) runs
    every ``refine_interval`` iterations inside the refinement window; the
    pool is released at the window's end.  Raises ``FitDivergedError`` with
    a snapshot if the loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset contains no views")
    rng = np.random.default_rng(cfg.seed)
    volume, pool = initialize(cfg.resolution, dataset.bounds)
    state = AdamState.zeros(volume.n_points)
    eps_offsets = cfg.weights.epsilon_offsets
    if eps_offsets is None:
        eps_offsets = default_epsilon_offsets(dataset.bounds, cfg.resolution)
    eps_clamp = eps_offsets if cfg.optimize_offsets else 0.0
    pool_radius = cfg.pool_radius
    if pool_radius is None:
        pool_radius = 2.0 * float(dataset.bounds.spacing(cfg.resolution).min())
    refine_end = cfg.resolved_refine_end()
    accum = ViewspaceAccumulator(volume.n_points)
    metrics: list[IterationMetrics] = []

    order = rng.permutation(len(dataset))
    cursor = 0
    for it in range(1, cfg.total_iters + 1):
        if cursor == len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        view = int(order[cursor])
        cursor += 1
        cam = dataset.cameras[view]
        target = dataset.images[view]
        rendered = render(volume, cam, dataset.background,
                          options=cfg.render_options, parallel=cfg.parallel)
        loss = fitting_loss(rendered, target, volume, cfg.weights, eps_offsets)
        if not math.isfinite(loss.total):
            raise FitDivergedError(
                f"non-finite loss {loss.total} at iteration {it}", it, snapshot=volume.copy())
        grads = render_backward(volume, cam, dataset.background, loss.image_gradient,
                                options=cfg.render_options, parallel=cfg.parallel)
        grads.offset += loss.offset_gradient
        if not cfg.optimize_offsets:
            grads.offset[:] = 0.0
        accum.update(grads)
        adam_step(volume, grads, state, cfg)
        metrics.append(IterationMetrics(it, loss.total, loss.psnr, volume.n_active))
        if on_iteration is not None:
            on_iteration(it, volume, pool, grads)

        if (cfg.use_cps and cfg.refine_start <= it <= refine_end
                and (it - cfg.refine_start) % cfg.refine_interval == 0):
            pruned = prune_select(volume, cfg.prune_opacity)
            densified = np.setdiff1d(
                densify_select(volume, accum.mean(), cfg.densify_grad), pruned)
            activated = pool_exchange(volume, pool, pruned, densified, eps_clamp,
                                      pool_radius=pool_radius, rng=rng)
            if activated:
                state.reset_indices(np.asarray(activated))
            accum.reset()
            if on_refine is not None:
                on_refine(it, volume, pool)
        if cfg.use_cps and it == refine_end:
            released = release_pool(volume, pool)
            if released.size:
                state.reset_indices(released)
            if on_refine is not None:
                on_refine(it, volume, pool)
    return FitResult(volume=volume, pool=pool, metrics=metrics)


def evaluate_views(volume: GaussianVolume, dataset: ViewSet, *,
                   options: RenderOptions = DEFAULT_OPTIONS,
                   parallel: bool = False) -> list[tuple[float, float, float]]:
    """(L1, SSIM, PSNR) of the volume's renders against every dataset view."""
    rows = []
    for cam, target in zip(dataset.cameras, dataset.images):
        img = render(volume, cam, dataset.background, options=options, parallel=parallel)
        rows.append(image_terms(img, target))
    return rows
