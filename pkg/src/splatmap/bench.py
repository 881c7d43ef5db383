"""Benchmarks for the training-acceleration strategies: tiled vs reference
forward, per-Gaussian vs per-pixel backward, tile culling on/off, and sparse
vs dense Adam."""

from __future__ import annotations

import time

import numpy as np

from .adam import AdamState, adam_step
from .backward import backward_per_gaussian, backward_per_pixel
from .forward import bin_and_sort, reference_render, render
from .projection import logit, project_gaussians
from .scene import CameraIntrinsics, CameraPose, GaussianMap

DEFAULT_REPS = 10


def build_view_map(rng, n, intr, depth=(4.0, 12.0), sigma_px=(3.0, 9.0),
                   opacity=(0.55, 0.95), anisotropy: float = 1.0,
                   dtype=np.float32) -> GaussianMap:
    """Random map whose Gaussians fill the given view (identity pose)."""
    z = rng.uniform(*depth, n)
    u = rng.uniform(0, intr.width - 1, n)
    v = rng.uniform(0, intr.height - 1, n)
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    positions = np.stack([x, y, z], axis=1)

    sig = rng.uniform(*sigma_px, n)
    s_world = sig * z / intr.fx
    log_scales = np.log(np.repeat(s_world[:, None], 3, axis=1))
    if anisotropy != 1.0:
        log_scales[:, 0] += np.log(anisotropy)

    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ops = np.array([logit(o) for o in rng.uniform(*opacity, n)])
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rng.uniform(-1.0, 1.5, (n, 3))
    m = GaussianMap(dtype=dtype)
    m.append_arrays(positions, log_scales, q, ops, sh, np.zeros(n, dtype=bool))
    return m


def _project(m, pose, intr):
    return project_gaussians(m.positions, m.log_scales, m.rotations,
                             m.opacity_logits, m.sh_coeffs, pose, intr)


def _time(fn, reps):
    fn()  # warmup: JIT compilation and cache effects stay out of the stats
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    return float(np.median(times)), float(np.quantile(times, 0.95))


def bench_forward(n=100_000, width=640, height=480, reps=DEFAULT_REPS, seed=0):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(fx=500, fy=500, cx=width / 2, cy=height / 2,
                            width=width, height=height)
    pose = CameraPose.identity()
    m = build_view_map(rng, n, intr)
    screen = _project(m, pose, intr)

    def tiled():
        grid = bin_and_sort(screen, intr)
        render(grid, screen, intr)

    def reference():
        reference_render(screen, intr)

    fast_med, fast_p95 = _time(tiled, reps)
    base_med, base_p95 = _time(reference, reps)
    return {"workload": "forward_tiled_vs_reference", "n_gaussians": n,
            "image": f"{width}x{height}", "reps": reps,
            "baseline_median_s": base_med, "baseline_p95_s": base_p95,
            "accelerated_median_s": fast_med, "accelerated_p95_s": fast_p95,
            "speedup": base_med / fast_med}


def bench_backward(n=20_000, width=160, height=120, reps=DEFAULT_REPS, seed=0):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(fx=130, fy=130, cx=width / 2, cy=height / 2,
                            width=width, height=height)
    pose = CameraPose.identity()
    m = build_view_map(rng, n, intr)
    screen = _project(m, pose, intr)
    grid = bin_and_sort(screen, intr)
    targets = render(grid, screen, intr)
    d_color = rng.normal(size=targets.color.shape).astype(m.dtype)

    def per_gaussian():
        backward_per_gaussian(targets, d_color, screen, grid, m, pose, intr)

    def per_pixel():
        backward_per_pixel(targets, d_color, screen, grid, m, pose, intr)

    fast_med, fast_p95 = _time(per_gaussian, reps)
    base_med, base_p95 = _time(per_pixel, reps)
    return {"workload": "backward_per_gaussian_vs_per_pixel", "n_gaussians": n,
            "image": f"{width}x{height}", "reps": reps,
            "baseline_median_s": base_med, "baseline_p95_s": base_p95,
            "accelerated_median_s": fast_med, "accelerated_p95_s": fast_p95,
            "speedup": base_med / fast_med}


def bench_culling(n=20_000, width=320, height=240, anisotropy=30.0,
                  reps=DEFAULT_REPS, seed=0):
    """Slim-Gaussian stress: pair reduction and output agreement."""
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(fx=260, fy=260, cx=width / 2, cy=height / 2,
                            width=width, height=height)
    pose = CameraPose.identity()
    m = build_view_map(rng, n, intr, sigma_px=(0.8, 2.0), anisotropy=anisotropy)
    screen = _project(m, pose, intr)

    def with_cull():
        grid = bin_and_sort(screen, intr, cull=True)
        render(grid, screen, intr)

    def without_cull():
        grid = bin_and_sort(screen, intr, cull=False)
        render(grid, screen, intr)

    grid_on = bin_and_sort(screen, intr, cull=True)
    grid_off = bin_and_sort(screen, intr, cull=False)
    img_on = render(grid_on, screen, intr).color
    img_off = render(grid_off, screen, intr).color
    delta = float(np.abs(img_on - img_off).max())

    fast_med, fast_p95 = _time(with_cull, reps)
    base_med, base_p95 = _time(without_cull, reps)
    return {"workload": "tile_culling_on_vs_off", "n_gaussians": n,
            "image": f"{width}x{height}", "reps": reps,
            "baseline_median_s": base_med, "baseline_p95_s": base_p95,
            "accelerated_median_s": fast_med, "accelerated_p95_s": fast_p95,
            "speedup": base_med / fast_med,
            "pairs_kept_fraction": grid_on.n_pairs / max(grid_off.n_pairs, 1),
            "max_color_delta": delta}


def bench_adam(n=1_000_000, active_fraction=0.1, reps=DEFAULT_REPS, seed=0):
    rng = np.random.default_rng(seed)
    lrs = {"position": 1.6e-4, "sh0": 2.5e-3, "sh_rest": 1.25e-4,
           "opacity_logit": 5e-2, "log_scale": 5e-3, "rotation": 1e-3}
    params = {"position": rng.normal(size=(n, 3)).astype(np.float32),
              "log_scale": rng.normal(size=(n, 3)).astype(np.float32),
              "rotation": rng.normal(size=(n, 4)).astype(np.float32),
              "opacity_logit": rng.normal(size=(n,)).astype(np.float32),
              "sh": rng.normal(size=(n, 16, 3)).astype(np.float32)}
    grads = {k: rng.normal(size=v.shape).astype(np.float32)
             for k, v in params.items()}
    n_active = int(n * active_fraction)
    active = np.sort(rng.choice(n, size=n_active, replace=False))

    state_sparse = AdamState(n, lrs, dtype=np.float32)
    state_dense = AdamState(n, lrs, dtype=np.float32)

    def sparse():
        adam_step(params, grads, state_sparse, active=active)

    def dense():
        adam_step(params, grads, state_dense, active=None)

    fast_med, fast_p95 = _time(sparse, reps)
    base_med, base_p95 = _time(dense, reps)
    return {"workload": "adam_sparse_vs_dense", "n_gaussians": n,
            "image": f"active={active_fraction:.0%}", "reps": reps,
            "baseline_median_s": base_med, "baseline_p95_s": base_p95,
            "accelerated_median_s": fast_med, "accelerated_p95_s": fast_p95,
            "speedup": base_med / fast_med}


def run_benchmarks(workloads=("forward", "backward", "culling", "adam"),
                   reps=DEFAULT_REPS, seed=0, scale: float = 1.0):
    """Run the configured workloads; ``scale`` shrinks sizes for smoke runs."""
    rows = []
    for w in workloads:
        if w == "forward":
            rows.append(bench_forward(n=int(100_000 * scale), reps=reps, seed=seed))
        elif w == "backward":
            rows.append(bench_backward(n=int(20_000 * scale), reps=reps, seed=seed))
        elif w == "culling":
            rows.append(bench_culling(n=int(20_000 * scale), reps=reps, seed=seed))
        elif w == "adam":
            rows.append(bench_adam(n=int(1_000_000 * scale), reps=reps, seed=seed))
        else:
            raise ValueError(f"unknown benchmark workload {w!r}")
    return rows
