"""Grid-anchored Gaussian splatting toolkit.

Fits multi-view images into a fixed lattice of 3D Gaussians with
candidate-pool density control, extracts the coarse distance-field
geometry, and ships the diffusion-schedule math used to generate it.
"""

from . import errors
from .diffusion import (DiffusionSchedule, OracleDenoiser, ZeroDenoiser,
                        build_schedule, mse_noise_loss, normalize_gdf, q_sample, sample)
from .fitting import (AdamState, FitConfig, FitResult, IterationMetrics, LearningRates,
                      ViewspaceAccumulator, adam_step, densify_select, evaluate_views,
                      fit, initialize, pool_exchange, prune_select, release_pool)
from .gdf import GDFVolume, extract_gdf, gdf_oracle
from .losses import (FittingLoss, LossWeights, default_epsilon_offsets, fitting_loss,
                     image_terms, offsets_reg, offsets_reg_gradient, psnr, ssim,
                     ssim_gradient, stage2_losses, volume_mse)
from .model import (Bounds, Camera, CandidatePool, GaussianAttributes, GaussianVolume,
                    ImageBuffer, ViewSet, activate, default_bounds, gaussian_center,
                    grid_coords, grid_index, grid_position)
from .projection import ProjectedSplat, covariance3d, project, quaternion_to_rotation
from .render import GradientBuffer, RenderOptions, render, render_backward
from .synthetic import SceneSpec, fibonacci_sphere, make_scene, render_dataset, sphere_cameras

__version__ = "0.1.0"
