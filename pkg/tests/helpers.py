"""Shared scene builders for the test suite."""

import numpy as np

from splatmap.projection import logit, project_gaussians
from splatmap.scene import (CameraIntrinsics, CameraPose, Gaussian,
                            GaussianMap)


def random_map(rng, n, dtype=np.float64, spread=2.0, depth=(3.0, 8.0),
               opacity=(0.15, 0.8), scale=(0.05, 0.4)):
    m = GaussianMap(dtype=dtype)
    gaussians = []
    for _ in range(n):
        pos = np.array([rng.uniform(-spread, spread),
                        rng.uniform(-spread, spread),
                        rng.uniform(*depth)])
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        gaussians.append(Gaussian(
            position=pos,
            log_scale=np.log(rng.uniform(*scale, size=3)),
            rotation=q,
            opacity_logit=logit(rng.uniform(*opacity)),
            sh_coeffs=rng.normal(0.0, 0.3, size=(16, 3)),
        ))
    m.append(gaussians)
    return m


def project_map(gmap, pose, intr, **kw):
    return project_gaussians(gmap.positions, gmap.log_scales, gmap.rotations,
                             gmap.opacity_logits, gmap.sh_coeffs, pose, intr,
                             **kw)


def small_intrinsics(size=64, f=None):
    f = f if f is not None else size
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2, cy=size / 2,
                            width=size, height=size)


def single_splat_screen(mean2d, inv_cov2d, depth, color, opacity, intr,
                        dtype=np.float64):
    """SplatScreen with directly specified screen-space rows (bypassing
    projection) for closed-form compositing tests."""
    from splatmap.projection import SplatScreen

    mean2d = np.atleast_2d(np.asarray(mean2d, dtype=dtype))
    n = mean2d.shape[0]
    inv = np.asarray(inv_cov2d, dtype=dtype).reshape(-1, 2, 2)
    if inv.shape[0] == 1 and n > 1:
        inv = np.repeat(inv, n, axis=0)
    cov = np.linalg.inv(inv)
    depth = np.atleast_1d(np.asarray(depth, dtype=dtype))
    color = np.atleast_2d(np.asarray(color, dtype=dtype))
    opacity = np.atleast_1d(np.asarray(opacity, dtype=dtype))
    lam = np.linalg.eigvalsh(cov).max(axis=1)
    q_cut = 2.0 * np.log(opacity * 255.0)
    radius = np.sqrt(np.maximum(q_cut, 0.0) * lam) * (1 + 1e-5) + 1e-3
    return SplatScreen(
        mean2d=mean2d, cov2d=cov, inv_cov2d=inv, depth=depth,
        color=color, opacity=opacity,
        source_index=np.arange(n, dtype=np.int64),
        t_cam=np.zeros((n, 3), dtype=dtype),
        t_clamped=np.zeros((n, 3), dtype=dtype),
        clamped_x=np.zeros(n, dtype=bool), clamped_y=np.zeros(n, dtype=bool),
        view_dir=np.tile(np.array([0.0, 0.0, 1.0], dtype=dtype), (n, 1)),
        basis=np.zeros((n, 16), dtype=dtype),
        color_raw=color.astype(dtype), radius_cut=radius.astype(dtype),
        q_cut=q_cut.astype(dtype),
    )


def brute_force_composite(screen, intr):
    """Test-local per-pixel oracle: literal front-to-back expansion of the
    compositing sums with a global depth sort, no shortcuts at all."""
    H, W = intr.height, intr.width
    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    O = np.zeros((H, W))
    order = np.lexsort((screen.source_index, screen.depth))
    for py in range(H):
        for px in range(W):
            trans = 1.0
            for i in order:
                d = screen.mean2d[i] - np.array([px, py], dtype=np.float64)
                q = float(d @ screen.inv_cov2d[i] @ d)
                a = min(screen.opacity[i] * np.exp(-0.5 * q), 0.99)
                if a < 1.0 / 255.0:
                    continue
                w = a * trans
                C[py, px] += w * screen.color[i]
                D[py, px] += w * screen.depth[i]
                O[py, px] += w
                trans *= 1.0 - a
    return C, D, O


def identity_pose():
    return CameraPose.identity()
