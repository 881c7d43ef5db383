"""Randomized gradient verification: renders small 64-bit scenes and compares
every analytic parameter gradient against central finite differences.

Scene draws keep the forward smooth at the evaluation point: splats larger
than the image (their 1/255-cutoff rings lie off screen), opacities well
below the 0.99 clamp, and transmittance far above the termination threshold.
The hard-cutoff and clamp subgradient conventions are covered by dedicated
unit tests instead, since finite differences straddling those boundaries
measure the jump, not the slope.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import (FiniteDifferenceReport, backward_per_gaussian,
                       finite_difference_check)
from .forward import bin_and_sort, render
from .loss import ExposureAffine, photometric_loss
from .projection import logit, project_gaussians
from .scene import CameraIntrinsics, CameraPose, Gaussian, GaussianMap


@dataclass
class GradCheckScene:
    gmap: GaussianMap
    pose: CameraPose
    intr: CameraIntrinsics
    target: np.ndarray
    exposure: ExposureAffine
    loss_lambda: float = 0.2


def build_gradcheck_scene(seed: int, n_gaussians: int = 20,
                          image_size: int = 24) -> GradCheckScene:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(max(4, n_gaussians // 2), n_gaussians + 1))
    intr = CameraIntrinsics(fx=image_size, fy=image_size,
                            cx=image_size / 2.0, cy=image_size / 2.0,
                            width=image_size, height=image_size)
    pose = CameraPose.identity()
    gmap = GaussianMap(dtype=np.float64)
    gaussians = []
    for _ in range(n):
        depth = rng.uniform(3.0, 7.0)
        sigma_px = rng.uniform(25.0, 60.0)
        s_world = sigma_px * depth / intr.fx
        pos = np.array([rng.uniform(-0.3, 0.3) * depth,
                        rng.uniform(-0.3, 0.3) * depth, depth])
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        gaussians.append(Gaussian(
            position=pos,
            log_scale=np.log(s_world * rng.uniform(0.7, 1.4, 3)),
            rotation=q,
            opacity_logit=logit(rng.uniform(0.05, 0.25)),
            sh_coeffs=rng.normal(0.0, 0.3, (16, 3)),
        ))
    gmap.append(gaussians)
    target = rng.uniform(0.0, 1.0, (image_size, image_size, 3))
    E = ExposureAffine.identity()
    E.matrix = E.matrix + rng.normal(0.0, 0.02, (3, 4))
    return GradCheckScene(gmap, pose, intr, target, E)


def scene_loss(scene: GradCheckScene) -> float:
    m = scene.gmap
    screen = project_gaussians(m.positions, m.log_scales, m.rotations,
                               m.opacity_logits, m.sh_coeffs,
                               scene.pose, scene.intr)
    grid = bin_and_sort(screen, scene.intr)
    targets = render(grid, screen, scene.intr)
    loss, _, _, _ = photometric_loss(targets.color, scene.target,
                                     scene.exposure, scene.loss_lambda)
    return loss


def check_scene(scene: GradCheckScene, epsilon: float = 1e-5,
                backward_fn=None) -> FiniteDifferenceReport:
    """Analytic gradients of one scene against central differences."""
    if backward_fn is None:
        backward_fn = backward_per_gaussian
    m = scene.gmap
    screen = project_gaussians(m.positions, m.log_scales, m.rotations,
                               m.opacity_logits, m.sh_coeffs,
                               scene.pose, scene.intr)
    grid = bin_and_sort(screen, scene.intr)
    targets = render(grid, screen, scene.intr)
    _, d_rendered, d_E, _ = photometric_loss(targets.color, scene.target,
                                             scene.exposure, scene.loss_lambda)
    buf = backward_fn(targets, d_rendered, screen, grid, m,
                      scene.pose, scene.intr)
    params = {"position": m.positions, "log_scale": m.log_scales,
              "rotation": m.rotations, "opacity_logit": m.opacity_logits,
              "sh": m.sh_coeffs, "exposure": scene.exposure.matrix}
    analytic = {"position": buf.d_position, "log_scale": buf.d_log_scale,
                "rotation": buf.d_rotation,
                "opacity_logit": buf.d_opacity_logit,
                "sh": buf.d_sh, "exposure": d_E}
    return finite_difference_check(params, lambda p: scene_loss(scene),
                                   analytic, epsilon=epsilon)


def run_gradcheck(n_scenes: int = 20, seed: int = 0, epsilon: float = 1e-5,
                  n_gaussians: int = 20, image_size: int = 24,
                  backward_fn=None):
    """Check ``n_scenes`` random scenes; returns (worst report list, passed)."""
    reports = []
    for i in range(n_scenes):
        scene = build_gradcheck_scene(seed + i, n_gaussians=n_gaussians,
                                      image_size=image_size)
        reports.append(check_scene(scene, epsilon=epsilon,
                                   backward_fn=backward_fn))
    worst = max(r.worst_rel_error for r in reports)
    return reports, worst <= 1e-4
