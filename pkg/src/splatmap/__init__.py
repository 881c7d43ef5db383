"""splatmap: incremental photo-realistic mapping with anisotropic 3D
Gaussian splatting, on the CPU."""

__version__ = "0.1.0"

from .backward import (GradientBuffer, backward_per_gaussian,
                       backward_per_pixel, finite_difference_check)
from .forward import (RenderTargets, TileGrid, bin_and_sort, cull_tiles,
                      reference_render, render)
from .loss import ExposureAffine, apply_exposure, photometric_loss, ssim
from .mapper import Mapper, MapperConfig, init_sky, run_pipeline
from .projection import (SplatScreen, alpha_weight, covariance_3d,
                         evaluate_sh, project_covariance, project_gaussians,
                         project_mean)
from .scene import (CameraFrame, CameraIntrinsics, CameraPose, ColoredPoint,
                    Gaussian, GaussianMap, frustum_contains)
from .sim import (GenerateConfig, SyntheticScene, generate_dataset,
                  raycast_render, simulate_lidar, triangulate_track)

__all__ = [
    "CameraFrame", "CameraIntrinsics", "CameraPose", "ColoredPoint",
    "ExposureAffine", "Gaussian", "GaussianMap", "GenerateConfig",
    "GradientBuffer", "Mapper", "MapperConfig", "RenderTargets",
    "SplatScreen", "SyntheticScene", "TileGrid", "alpha_weight",
    "apply_exposure", "backward_per_gaussian", "backward_per_pixel",
    "bin_and_sort", "covariance_3d", "cull_tiles", "evaluate_sh",
    "finite_difference_check", "frustum_contains", "generate_dataset",
    "init_sky", "photometric_loss", "project_covariance",
    "project_gaussians", "project_mean", "raycast_render", "reference_render",
    "render", "run_pipeline", "simulate_lidar", "ssim", "triangulate_track",
    "__version__",
]
