"""Core scene data model: Gaussians, the map store, cameras, and frames."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

DEFAULT_CAPACITY = 4_000_000
DEFAULT_NEAR = 0.01
DEFAULT_FRUSTUM_MARGIN = 0.1

MAP_MAGIC = b"GMAP"
MAP_VERSION = 1


class CapacityError(RuntimeError):
    """Raised when appending would exceed the map's hard capacity cap."""


class PointSource(Enum):
    LIDAR = 0
    SFM = 1


@dataclass
class Gaussian:
    """A single anisotropic Gaussian primitive.

    Scales are stored in log space and opacity as a logit so unconstrained
    gradient steps keep scales positive and opacity in (0, 1).
    """

    position: np.ndarray        # (3,) world meters
    log_scale: np.ndarray       # (3,) log-meters
    rotation: np.ndarray        # (4,) unit quaternion (w, x, y, z)
    opacity_logit: float
    sh_coeffs: np.ndarray       # (16, 3) spherical-harmonic coefficients
    is_sky: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(16, 3)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class CameraPose:
    """World-to-camera transform: x_cam = rotation_wc @ x_world + translation_wc."""

    rotation_wc: np.ndarray     # (3, 3)
    translation_wc: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation_wc = np.asarray(self.rotation_wc, dtype=np.float64).reshape(3, 3)
        self.translation_wc = np.asarray(self.translation_wc, dtype=np.float64).reshape(3)

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates."""
        return -self.rotation_wc.T @ self.translation_wc

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))


@dataclass
class ColoredPoint:
    position_w: np.ndarray      # (3,)
    rgb: np.ndarray             # (3,) in [0, 1]
    source: PointSource = PointSource.LIDAR

    def __post_init__(self):
        self.position_w = np.asarray(self.position_w, dtype=np.float64).reshape(3)
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(3)


@dataclass
class CameraFrame:
    pose: CameraPose
    intrinsics: CameraIntrinsics
    image: np.ndarray           # (H, W, 3) in [0, 1]
    points: list = field(default_factory=list)
    frame_index: int = 0
    is_keyframe: bool = False

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError("image dimensions do not match intrinsics")


class GaussianMap:
    """Structure-of-arrays store for all Gaussian parameters.

    Single-writer: appends are excluded while a render or gradient pass is
    in flight; read-only views of the arrays may be shared freely.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, dtype=np.float32):
        self.capacity = int(capacity)
        self.dtype = np.dtype(dtype)
        self.positions = np.zeros((0, 3), dtype=self.dtype)
        self.log_scales = np.zeros((0, 3), dtype=self.dtype)
        self.rotations = np.zeros((0, 4), dtype=self.dtype)
        self.opacity_logits = np.zeros((0,), dtype=self.dtype)
        self.sh_coeffs = np.zeros((0, 16, 3), dtype=self.dtype)
        self.is_sky = np.zeros((0,), dtype=bool)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def sky_count(self) -> int:
        return int(self.is_sky.sum())

    def __len__(self) -> int:
        return self.count

    def append(self, gaussians: list[Gaussian]) -> int:
        """Append Gaussians, returning the new count.

        Raises CapacityError instead of silently truncating.
        """
        n = len(gaussians)
        if n == 0:
            return self.count
        if self.count + n > self.capacity:
            raise CapacityError(
                f"appending {n} Gaussians would exceed capacity {self.capacity} "
                f"(current count {self.count})"
            )
        dt = self.dtype
        pos = np.array([g.position for g in gaussians], dtype=dt).reshape(n, 3)
        ls = np.array([g.log_scale for g in gaussians], dtype=dt).reshape(n, 3)
        rot = np.array([g.rotation for g in gaussians], dtype=dt).reshape(n, 4)
        op = np.array([g.opacity_logit for g in gaussians], dtype=dt).reshape(n)
        sh = np.array([g.sh_coeffs for g in gaussians], dtype=dt).reshape(n, 16, 3)
        sky = np.array([g.is_sky for g in gaussians], dtype=bool).reshape(n)
        self.positions = np.concatenate([self.positions, pos])
        self.log_scales = np.concatenate([self.log_scales, ls])
        self.rotations = np.concatenate([self.rotations, rot])
        self.opacity_logits = np.concatenate([self.opacity_logits, op])
        self.sh_coeffs = np.concatenate([self.sh_coeffs, sh])
        self.is_sky = np.concatenate([self.is_sky, sky])
        return self.count

    def append_arrays(self, positions, log_scales, rotations, opacity_logits,
                      sh_coeffs, is_sky) -> int:
        """Bulk append from parallel arrays (fast path for expansion)."""
        n = len(positions)
        if n == 0:
            return self.count
        if self.count + n > self.capacity:
            raise CapacityError(
                f"appending {n} Gaussians would exceed capacity {self.capacity} "
                f"(current count {self.count})"
            )
        dt = self.dtype
        self.positions = np.concatenate([self.positions, np.asarray(positions, dt).reshape(n, 3)])
        self.log_scales = np.concatenate([self.log_scales, np.asarray(log_scales, dt).reshape(n, 3)])
        self.rotations = np.concatenate([self.rotations, np.asarray(rotations, dt).reshape(n, 4)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.asarray(opacity_logits, dt).reshape(n)])
        self.sh_coeffs = np.concatenate([self.sh_coeffs, np.asarray(sh_coeffs, dt).reshape(n, 16, 3)])
        self.is_sky = np.concatenate([self.is_sky, np.asarray(is_sky, bool).reshape(n)])
        return self.count

    def get(self, index: int) -> Gaussian:
        return Gaussian(
            position=self.positions[index].astype(np.float64),
            log_scale=self.log_scales[index].astype(np.float64),
            rotation=self.rotations[index].astype(np.float64),
            opacity_logit=float(self.opacity_logits[index]),
            sh_coeffs=self.sh_coeffs[index].astype(np.float64),
            is_sky=bool(self.is_sky[index]),
        )

    def __iter__(self):
        for i in range(self.count):
            yield self.get(i)

    def bounding_box(self):
        if self.count == 0:
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    # --- serialization -----------------------------------------------------
    # Binary layout (all little-endian):
    #   magic "GMAP" | u32 version | u64 count | u64 sky_count
    #   then each parameter array contiguously as float32:
    #   positions (N*3), log_scales (N*3), rotations (N*4),
    #   opacity_logits (N), sh_coeffs (N*48), is_sky (N, 0.0/1.0)

    def save(self, path) -> None:
        n = self.count
        with open(path, "wb") as f:
            f.write(MAP_MAGIC)
            f.write(struct.pack("<IQQ", MAP_VERSION, n, self.sky_count))
            for arr in (self.positions, self.log_scales, self.rotations,
                        self.opacity_logits, self.sh_coeffs,
                        self.is_sky.astype(np.float32)):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, capacity: int = DEFAULT_CAPACITY, dtype=np.float32) -> "GaussianMap":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != MAP_MAGIC:
                raise ValueError(f"not a Gaussian map file (magic {magic!r})")
            version, n, _sky = struct.unpack("<IQQ", f.read(20))
            if version != MAP_VERSION:
                raise ValueError(f"unsupported map version {version}")
            if n > capacity:
                capacity = n

            def read(shape):
                count = int(np.prod(shape))
                buf = f.read(count * 4)
                if len(buf) != count * 4:
                    raise ValueError("truncated map file")
                return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)

            m = cls(capacity=capacity, dtype=dtype)
            m.positions = read((n, 3))
            m.log_scales = read((n, 3))
            m.rotations = read((n, 4))
            m.opacity_logits = read((n,))
            m.sh_coeffs = read((n, 16, 3))
            m.is_sky = read((n,)) > 0.5
        return m

    def summary(self) -> str:
        lo, hi = self.bounding_box()
        return (
            f"count = {self.count}\n"
            f"sky_count = {self.sky_count}\n"
            f"bbox_min = {lo[0]:.6g} {lo[1]:.6g} {lo[2]:.6g}\n"
            f"bbox_max = {hi[0]:.6g} {hi[1]:.6g} {hi[2]:.6g}\n"
        )


def frustum_contains(pose: CameraPose, intr: CameraIntrinsics, point_w,
                     near: float = DEFAULT_NEAR,
                     margin: float = DEFAULT_FRUSTUM_MARGIN) -> bool:
    """True iff the point is in front of the camera and projects inside the
    image rectangle padded by ``margin`` (a fraction of image size).

    The zero-margin rectangle is [0, W-1] x [0, H-1] in pixel-center
    coordinates (the bilinear-safe region).
    """
    p = np.asarray(point_w, dtype=np.float64).reshape(3)
    pc = pose.rotation_wc @ p + pose.translation_wc
    if pc[2] <= near:
        return False
    u = intr.fx * pc[0] / pc[2] + intr.cx
    v = intr.fy * pc[1] / pc[2] + intr.cy
    mx = margin * intr.width
    my = margin * intr.height
    return (-mx <= u <= intr.width - 1 + mx) and (-my <= v <= intr.height - 1 + my)


def frustum_mask(pose: CameraPose, intr: CameraIntrinsics, points_w: np.ndarray,
                 near: float = DEFAULT_NEAR,
                 margin: float = DEFAULT_FRUSTUM_MARGIN) -> np.ndarray:
    """Vectorized frustum_contains over an (N, 3) array of world points."""
    pts = np.asarray(points_w)
    pc = pts @ pose.rotation_wc.T.astype(pts.dtype) + pose.translation_wc.astype(pts.dtype)
    z = pc[:, 2]
    ok = z > near
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / z + intr.cx
        v = intr.fy * pc[:, 1] / z + intr.cy
    mx = margin * intr.width
    my = margin * intr.height
    ok &= (u >= -mx) & (u <= intr.width - 1 + mx)
    ok &= (v >= -my) & (v <= intr.height - 1 + my)
    return ok
