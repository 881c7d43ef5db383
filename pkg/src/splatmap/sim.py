"""Synthetic frontend replacing the odometry: ground-truth scenes rendered by
an independent ray-cast oracle, LiDAR-like point sampling, feature-track
simulation with DLT triangulation, and on-disk dataset generation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .scene import CameraIntrinsics, CameraPose, frustum_mask

HIT_EPS = 1e-9


# --- primitives ---------------------------------------------------------------

class Albedo:
    """Diffuse albedo: solid color or a 3D checker of two colors."""

    def __init__(self, color_a, color_b=None, period: float = 1.0):
        self.color_a = np.asarray(color_a, dtype=np.float64)
        self.color_b = None if color_b is None else np.asarray(color_b, dtype=np.float64)
        self.period = period

    def __call__(self, points: np.ndarray) -> np.ndarray:
        if self.color_b is None:
            return np.broadcast_to(self.color_a, points.shape).copy()
        # half-period phase keeps integer-coordinate surfaces (walls, floors)
        # away from cell boundaries where floor() flips on float noise
        cells = np.floor(points / self.period + 0.5).astype(np.int64).sum(axis=1)
        out = np.where((cells % 2 == 0)[:, None], self.color_a, self.color_b)
        return out


class Sphere:
    def __init__(self, center, radius: float, albedo: Albedo):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.albedo = albedo

    def intersect(self, origins, dirs):
        L = origins - self.center
        b = (L * dirs).sum(axis=1)
        c = (L * L).sum(axis=1) - self.radius ** 2
        disc = b * b - c
        t = np.full(len(dirs), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        near = np.where(t0 > HIT_EPS, t0, np.where(t1 > HIT_EPS, t1, np.inf))
        t[ok] = near[ok]
        return t

    def surface_distance(self, points):
        return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius)

    def area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def sample_surface(self, rng, n):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v


class Rect:
    """Finite rectangle: origin point, two orthonormal in-plane axes, half sizes."""

    def __init__(self, origin, axis_u, axis_v, half_u, half_v, albedo: Albedo):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.axis_u = np.asarray(axis_u, dtype=np.float64)
        self.axis_u /= np.linalg.norm(self.axis_u)
        self.axis_v = np.asarray(axis_v, dtype=np.float64)
        self.axis_v -= self.axis_u * (self.axis_v @ self.axis_u)
        self.axis_v /= np.linalg.norm(self.axis_v)
        self.normal = np.cross(self.axis_u, self.axis_v)
        self.half_u = float(half_u)
        self.half_v = float(half_v)
        self.albedo = albedo

    def intersect(self, origins, dirs):
        denom = dirs @ self.normal
        num = (self.origin - origins) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
            hit = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        rel = hit - self.origin
        u = rel @ self.axis_u
        v = rel @ self.axis_v
        ok = (np.isfinite(t) & (t > HIT_EPS)
              & (np.abs(u) <= self.half_u) & (np.abs(v) <= self.half_v))
        return np.where(ok, t, np.inf)

    def surface_distance(self, points):
        rel = points - self.origin
        u = np.clip(rel @ self.axis_u, -self.half_u, self.half_u)
        v = np.clip(rel @ self.axis_v, -self.half_v, self.half_v)
        closest = self.origin + u[:, None] * self.axis_u + v[:, None] * self.axis_v
        return np.linalg.norm(points - closest, axis=1)

    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def sample_surface(self, rng, n):
        u = rng.uniform(-self.half_u, self.half_u, n)
        v = rng.uniform(-self.half_v, self.half_v, n)
        return self.origin + u[:, None] * self.axis_u + v[:, None] * self.axis_v


class Box:
    """Axis-aligned box."""

    def __init__(self, lo, hi, albedo: Albedo):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.albedo = albedo

    def intersect(self, origins, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t1 = (self.lo - origins) * inv
        t2 = (self.hi - origins) * inv
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        ok = t_far >= np.maximum(t_near, 0.0)
        t = np.where(t_near > HIT_EPS, t_near, t_far)
        return np.where(ok & (t > HIT_EPS), t, np.inf)

    def surface_distance(self, points):
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        d = np.abs(points - center) - half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def area(self) -> float:
        e = self.hi - self.lo
        return 2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def sample_surface(self, rng, n):
        e = self.hi - self.lo
        face_areas = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2],
                               e[0] * e[2], e[0] * e[1], e[0] * e[1]])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = self.lo + rng.uniform(0.0, 1.0, (n, 3)) * e
        axis = faces // 2
        side = faces % 2
        bound = np.where(side == 0, self.lo[axis], self.hi[axis])
        pts[np.arange(n), axis] = bound
        return pts


@dataclass
class SyntheticScene:
    """Ground-truth world: primitives with albedos plus a background color."""

    primitives: list
    background: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.9, 1.0]))
    extent: float = 20.0

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit along each ray: (t, primitive index); inf/-1 for miss."""
        n = len(dirs)
        best_t = np.full(n, np.inf)
        best_p = np.full(n, -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_p[closer] = i
        return best_t, best_p

    def shade(self, points: np.ndarray, prim_idx: np.ndarray) -> np.ndarray:
        colors = np.broadcast_to(self.background, points.shape).copy()
        for i, prim in enumerate(self.primitives):
            sel = prim_idx == i
            if sel.any():
                colors[sel] = prim.albedo(points[sel])
        return colors

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        if not self.primitives:
            return np.full(len(points), np.inf)
        d = np.stack([p.surface_distance(points) for p in self.primitives])
        return d.min(axis=0)


def camera_rays(pose: CameraPose, intr: CameraIntrinsics):
    """World-frame unit rays through every pixel center, row-major."""
    c, r = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    d_cam = np.stack([(c.ravel() - intr.cx) / intr.fx,
                      (r.ravel() - intr.cy) / intr.fy,
                      np.ones(intr.width * intr.height)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ pose.rotation_wc  # R^T rows applied to row vectors
    origin = pose.camera_center()
    return origin, d_world


def raycast_render(scene: SyntheticScene, pose: CameraPose,
                   intr: CameraIntrinsics) -> np.ndarray:
    """Ground-truth image: nearest-intersection flat shading by albedo.

    Independent of the Gaussian rasterizer: no shared projection or
    compositing code.
    """
    origin, dirs = camera_rays(pose, intr)
    origins = np.broadcast_to(origin, dirs.shape)
    t, pidx = scene.trace(origins, dirs)
    pts = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    colors = scene.shade(pts, pidx)
    return colors.reshape(intr.height, intr.width, 3)


def lidar_directions(pattern: str, rays: int, rng: np.random.Generator,
                     rings: int = 16, elevation_span_deg: float = 15.0,
                     cone_half_angle_deg: float = 34.0) -> np.ndarray:
    """Sensor-frame ray directions (camera axes: x right, y down, z forward)."""
    if pattern == "spinning":
        n_az = max(1, rays // rings)
        elevations = np.deg2rad(np.linspace(-elevation_span_deg,
                                            elevation_span_deg, rings))
        az = np.linspace(0.0, 2.0 * np.pi, n_az, endpoint=False)
        e, a = np.meshgrid(elevations, az)
        e, a = e.ravel(), a.ravel()
        # Spin about the camera's vertical (y) axis; elevation from horizon.
        return np.stack([np.cos(e) * np.sin(a), -np.sin(e), np.cos(e) * np.cos(a)],
                        axis=1)
    if pattern == "solid_state":
        half = np.deg2rad(cone_half_angle_deg)
        cos_t = rng.uniform(np.cos(half), 1.0, rays)
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        phi = rng.uniform(0.0, 2.0 * np.pi, rays)
        return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    raise ValueError(f"unknown LiDAR pattern {pattern!r}")


def simulate_lidar(scene: SyntheticScene, pose: CameraPose, pattern: str,
                   rays: int, rng: np.random.Generator,
                   noise_sigma: float = 0.0, **pattern_kw) -> np.ndarray:
    """World-frame hit points for one scan; rays that miss return nothing."""
    if rays <= 0:
        raise ValueError("rays must be positive")
    d_cam = lidar_directions(pattern, rays, rng, **pattern_kw)
    d_world = d_cam @ pose.rotation_wc
    origin = pose.camera_center()
    origins = np.broadcast_to(origin, d_world.shape)
    t, _ = scene.trace(origins, d_world)
    hit = np.isfinite(t)
    t = t[hit]
    if noise_sigma > 0:
        t = t + rng.normal(0.0, noise_sigma, t.shape)
    return origin + t[:, None] * d_world[hit]


def downsample_points(points: np.ndarray, n_l: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Retain each point independently with probability 1/n_l."""
    if n_l < 1:
        raise ValueError("n_l must be >= 1")
    points = np.asarray(points)
    if n_l == 1 or len(points) == 0:
        return points
    keep = rng.random(len(points)) < 1.0 / n_l
    return points[keep]


def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear color lookup at pixel-center coordinates (u in [0, W-1])."""
    h, w = image.shape[:2]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    c00 = image[y0, x0]
    c01 = image[y0, x1]
    c10 = image[y1, x0]
    c11 = image[y1, x1]
    return (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
            + c10 * (1 - fx) * fy + c11 * fx * fy)


def colorize_points(points: np.ndarray, image: np.ndarray, pose: CameraPose,
                    intr: CameraIntrinsics, near: float = 0.01):
    """Project points onto the image; keep in-FoV ones with bilinear color.

    Returns (kept_points (M, 3), colors (M, 3)). The FoV test is exactly the
    zero-margin frustum test.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return points.reshape(0, 3), np.zeros((0, 3))
    keep = frustum_mask(pose, intr, points, near=near, margin=0.0)
    pts = points[keep]
    pc = pts @ pose.rotation_wc.T + pose.translation_wc
    u = intr.fx * pc[:, 0] / pc[:, 2] + intr.cx
    v = intr.fy * pc[:, 1] / pc[:, 2] + intr.cy
    return pts, bilinear_sample(image, u, v)


# --- feature tracks and triangulation ----------------------------------------

@dataclass
class FeatureTrack:
    track_id: int
    observations: list = field(default_factory=list)  # (keyframe ordinal, (u, v))

    def add(self, kf_index: int, pixel) -> None:
        if self.observations and kf_index <= self.observations[-1][0]:
            raise ValueError("observations must be ordered by keyframe index")
        self.observations.append((kf_index, np.asarray(pixel, dtype=np.float64)))


def triangulate_track(track: FeatureTrack, poses: list, intr: CameraIntrinsics,
                      n_t: int = 9, max_reproj_px: float = 2.0,
                      min_ray_angle: float = 1e-6):
    """Linear DLT over all of a track's observations.

    ``poses[i]`` is the CameraPose of keyframe ordinal ``observations[i][0]``.
    Requires >= n_t consecutive observations; rejects degenerate (parallel
    ray) geometry, negative depths, and mean reprojection error beyond the
    gate. Returns a world point or None.
    """
    obs = track.observations
    if len(obs) < max(n_t, 2):
        return None
    ks = [k for k, _ in obs]
    if any(b - a != 1 for a, b in zip(ks, ks[1:])):
        return None
    if len(poses) != len(obs):
        raise ValueError("need one pose per observation")

    K = np.array([[intr.fx, 0, intr.cx], [0, intr.fy, intr.cy], [0, 0, 1.0]])
    dirs = []
    rows = []
    for (kf, uv), pose in zip(obs, poses):
        P = K @ np.concatenate([pose.rotation_wc, pose.translation_wc[:, None]], axis=1)
        rows.append(uv[0] * P[2] - P[0])
        rows.append(uv[1] * P[2] - P[1])
        d_cam = np.array([(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy, 1.0])
        d_w = pose.rotation_wc.T @ d_cam
        dirs.append(d_w / np.linalg.norm(d_w))

    dirs = np.array(dirs)
    cos = np.clip(np.abs(dirs @ dirs[0]), -1.0, 1.0)
    if np.arccos(cos).max() < min_ray_angle:
        return None

    A = np.array(rows)
    _, _, vt = np.linalg.svd(A)
    xh = vt[-1]
    if abs(xh[3]) < 1e-12 * np.linalg.norm(xh[:3]):
        return None
    x = xh[:3] / xh[3]

    errs = []
    for (kf, uv), pose in zip(obs, poses):
        pc = pose.rotation_wc @ x + pose.translation_wc
        if pc[2] <= 0:
            return None
        proj = np.array([intr.fx * pc[0] / pc[2] + intr.cx,
                         intr.fy * pc[1] / pc[2] + intr.cy])
        errs.append(np.linalg.norm(proj - uv))
    if np.mean(errs) > max_reproj_px:
        return None
    return x


class TrackSimulator:
    """Persistent surface anchors projected into keyframes stand in for the
    corner detector and optical-flow tracker."""

    def __init__(self, scene: SyntheticScene, anchors: np.ndarray,
                 intr: CameraIntrinsics, n_k: int = 11, n_t: int = 9,
                 noise_px: float = 0.5, rng: np.random.Generator | None = None):
        self.scene = scene
        self.anchors = anchors
        self.intr = intr
        self.n_k = n_k
        self.n_t = n_t
        self.noise_px = noise_px
        self.rng = rng or np.random.default_rng(0)
        self.tracks = {i: FeatureTrack(i) for i in range(len(anchors))}
        self.track_poses = {i: [] for i in range(len(anchors))}
        self.consumed = np.zeros(len(anchors), dtype=bool)

    def _visible(self, pose: CameraPose) -> np.ndarray:
        vis = frustum_mask(pose, self.intr, self.anchors, margin=0.0)
        if not vis.any():
            return vis
        origin = pose.camera_center()
        d = self.anchors[vis] - origin
        dist = np.linalg.norm(d, axis=1)
        dirs = d / dist[:, None]
        t, _ = self.scene.trace(np.broadcast_to(origin, dirs.shape), dirs)
        unoccluded = np.abs(t - dist) <= 1e-6 * np.maximum(dist, 1.0) + 1e-9
        out = vis.copy()
        out[np.nonzero(vis)[0][~unoccluded]] = False
        return out

    def observe_keyframe(self, kf_ordinal: int, pose: CameraPose) -> np.ndarray:
        """Advance all tracks for one keyframe; returns newly triangulated
        world points (M, 3)."""
        vis = self._visible(pose)
        pc = self.anchors @ pose.rotation_wc.T + pose.translation_wc
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intr.fx * pc[:, 0] / pc[:, 2] + self.intr.cx
            v = self.intr.fy * pc[:, 1] / pc[:, 2] + self.intr.cy
        new_points = []
        for i in range(len(self.anchors)):
            if self.consumed[i]:
                continue
            track = self.tracks[i]
            if not vis[i]:
                if track.observations:
                    track.observations.clear()
                    self.track_poses[i].clear()
                continue
            uv = np.array([u[i], v[i]])
            if self.noise_px > 0:
                uv = uv + self.rng.normal(0.0, self.noise_px, 2)
            track.add(kf_ordinal, uv)
            self.track_poses[i].append(pose)
            if len(track.observations) > self.n_k:
                track.observations.pop(0)
                self.track_poses[i].pop(0)
            if len(track.observations) >= self.n_t:
                x = triangulate_track(track, self.track_poses[i], self.intr,
                                      n_t=self.n_t)
                if x is not None:
                    new_points.append(x)
                    self.consumed[i] = True
        return np.array(new_points) if new_points else np.zeros((0, 3))


# --- builtin scenes and dataset generation ------------------------------------

def build_scene(name: str) -> SyntheticScene:
    if name == "room":
        checker = Albedo([0.82, 0.82, 0.85], [0.25, 0.28, 0.33], period=1.0)
        prims = [
            Rect([0, 0, 0], [1, 0, 0], [0, 1, 0], 5.0, 5.0, checker),       # floor
            Rect([0, 5, 1.5], [1, 0, 0], [0, 0, 1], 5.0, 1.5,
                 Albedo([0.75, 0.55, 0.45])),                               # back wall
            Rect([-5, 0, 1.5], [0, 1, 0], [0, 0, 1], 5.0, 1.5,
                 Albedo([0.5, 0.65, 0.5])),                                 # left wall
            Rect([5, 0, 1.5], [0, 1, 0], [0, 0, 1], 5.0, 1.5,
                 Albedo([0.55, 0.55, 0.7])),                                # right wall
            Rect([0, -5, 1.5], [1, 0, 0], [0, 0, 1], 5.0, 1.5,
                 Albedo([0.68, 0.62, 0.55])),                               # front wall
            Box([-2.2, 1.0, 0.0], [-0.8, 2.4, 1.2],
                Albedo([0.85, 0.25, 0.2], [0.95, 0.6, 0.2], period=0.4)),
            Box([1.2, 2.0, 0.0], [2.6, 3.2, 0.9], Albedo([0.2, 0.45, 0.8])),
            Sphere([0.3, 0.0, 0.65], 0.65, Albedo([0.9, 0.8, 0.25])),
        ]
        return SyntheticScene(primitives=prims, extent=12.0)
    if name == "box":
        prims = [
            Rect([0, 0, 0], [1, 0, 0], [0, 1, 0], 4.0, 4.0,
                 Albedo([0.9, 0.9, 0.9], [0.15, 0.15, 0.2], period=0.8)),
            Sphere([0.0, 1.5, 0.8], 0.8, Albedo([0.85, 0.3, 0.25])),
        ]
        return SyntheticScene(primitives=prims, extent=8.0)
    raise ValueError(f"unknown builtin scene {name!r}")


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose with z forward, x right, y down."""
    c = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - c
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    r_cw = np.stack([x, y, f], axis=1)
    r_wc = r_cw.T
    return CameraPose(r_wc, -r_wc @ c)


def build_trajectory(name: str, n_frames: int) -> list[CameraPose]:
    poses = []
    if name == "room":
        for i in range(n_frames):
            s = i / max(n_frames - 1, 1)
            theta = np.deg2rad(-50.0 + 100.0 * s)
            pos = np.array([3.0 * np.sin(theta), -3.0 * np.cos(theta), 1.5])
            target = np.array([-0.8 * np.sin(theta), 2.0, 2.1])
            poses.append(look_at_pose(pos, target))
        return poses
    if name == "box":
        for i in range(n_frames):
            s = i / max(n_frames - 1, 1)
            theta = np.deg2rad(-40.0 + 80.0 * s)
            pos = np.array([3.0 * np.sin(theta), -2.5 * np.cos(theta), 1.4])
            target = np.array([0.0, 1.5, 0.8])
            poses.append(look_at_pose(pos, target))
        return poses
    raise ValueError(f"unknown builtin trajectory {name!r}")


@dataclass
class GenerateConfig:
    scene: str = "room"
    n_frames: int = 50
    width: int = 160
    height: int = 120
    fx: float = 130.0
    fy: float = 130.0
    lidar_pattern: str = "solid_state"
    lidar_rays: int = 20000
    lidar_noise: float = 0.0
    n_l: int = 10                 # random downsample: keep 1 of N_l
    keyframe_interval: int = 5
    sfm_anchors: int = 800
    sfm_noise_px: float = 0.5
    n_k: int = 11                 # sliding window length
    n_t: int = 9                  # consecutive observations to triangulate
    exposure_gain_min: float = 1.0
    exposure_gain_max: float = 1.0
    seed: int = 0


def generate_dataset(out_dir, cfg: GenerateConfig) -> dict:
    """Write the full dataset to disk; returns the manifest dict."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    scene = build_scene(cfg.scene)
    poses = build_trajectory(cfg.scene, cfg.n_frames)
    intr = CameraIntrinsics(fx=cfg.fx, fy=cfg.fy, cx=cfg.width / 2.0,
                            cy=cfg.height / 2.0, width=cfg.width, height=cfg.height)

    anchors = _sample_anchors(scene, cfg.sfm_anchors, rng)
    tracker = TrackSimulator(scene, anchors, intr, n_k=cfg.n_k, n_t=cfg.n_t,
                             noise_px=cfg.sfm_noise_px,
                             rng=np.random.default_rng(cfg.seed + 1))

    n_blocks = (cfg.n_frames + cfg.keyframe_interval - 1) // cfg.keyframe_interval
    gains = rng.uniform(cfg.exposure_gain_min, cfg.exposure_gain_max, n_blocks)

    manifest = {
        "frame_count": cfg.n_frames, "width": cfg.width, "height": cfg.height,
        "fx": cfg.fx, "fy": cfg.fy, "cx": cfg.width / 2.0, "cy": cfg.height / 2.0,
        "scene": cfg.scene, "seed": cfg.seed, "lidar_pattern": cfg.lidar_pattern,
        "lidar_rays": cfg.lidar_rays, "lidar_noise": cfg.lidar_noise,
        "n_l": cfg.n_l, "sfm_anchors": cfg.sfm_anchors,
        "sfm_noise_px": cfg.sfm_noise_px, "n_k": cfg.n_k, "n_t": cfg.n_t,
        "keyframe_interval": cfg.keyframe_interval,
        "exposure_gain_min": cfg.exposure_gain_min,
        "exposure_gain_max": cfg.exposure_gain_max,
    }

    kf_ordinal = 0
    for i in range(cfg.n_frames):
        pose = poses[i]
        image = raycast_render(scene, pose, intr)
        gain = gains[i // cfg.keyframe_interval]
        image = np.clip(image * gain, 0.0, 1.0)
        manifest[f"exposure_gain_{i:05d}"] = f"{gain:.6f}"

        raw = simulate_lidar(scene, pose, cfg.lidar_pattern, cfg.lidar_rays,
                             rng, noise_sigma=cfg.lidar_noise)
        kept = downsample_points(raw, cfg.n_l, rng)
        lidar_pts, lidar_rgb = colorize_points(kept, image, pose, intr)
        lidar_rec = np.concatenate(
            [lidar_pts, lidar_rgb, np.zeros((len(lidar_pts), 1))], axis=1)

        sfm_rec = np.zeros((0, 7))
        if i % cfg.keyframe_interval == 0:
            new_pts = tracker.observe_keyframe(kf_ordinal, pose)
            kf_ordinal += 1
            if len(new_pts):
                sfm_pts, sfm_rgb = colorize_points(new_pts, image, pose, intr)
                sfm_rec = np.concatenate(
                    [sfm_pts, sfm_rgb, np.ones((len(sfm_pts), 1))], axis=1)

        d = out / "frames" / f"{i:05d}"
        d.mkdir(parents=True, exist_ok=True)
        dataio.write_ppm(d / "image.ppm", image)
        dataio.write_pose(d / "pose.txt", pose)
        dataio.write_points(d / "lidar.bin", lidar_rec)
        dataio.write_points(d / "sfm.bin", sfm_rec)

    dataio.write_manifest(out / "manifest.txt", manifest)
    return manifest


def _sample_anchors(scene: SyntheticScene, n: int, rng: np.random.Generator):
    areas = np.array([p.area() for p in scene.primitives])
    probs = areas / areas.sum()
    counts = rng.multinomial(n, probs)
    parts = [p.sample_surface(rng, c) for p, c in zip(scene.primitives, counts) if c]
    return np.concatenate(parts) if parts else np.zeros((0, 3))
