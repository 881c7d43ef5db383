"""File formats: binary PPM images, raw float planes, point-record binaries,
plain-text poses and manifests, and the on-disk dataset layout.

Dataset layout:
    manifest.txt                 key = value lines (frame count, intrinsics,
                                 generation config echo)
    frames/NNNNN/image.ppm       binary P6, 8-bit
    frames/NNNNN/pose.txt        3 rows x 4 cols, world-to-camera [R | t]
    frames/NNNNN/lidar.bin       float32 LE records (x, y, z, r, g, b, flag)
    frames/NNNNN/sfm.bin         same record layout, flag = 1
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .scene import (CameraFrame, CameraIntrinsics, CameraPose, ColoredPoint,
                    PointSource)

PLANE_MAGIC = b"FPLN"
PLANE_VERSION = 1


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) [0,1] float or uint8 image as binary PPM (P6)."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float64 image in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    # Header: magic, width, height, maxval; comments allowed.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / float(maxval)


def write_float_plane(path, plane: np.ndarray) -> None:
    """Write an (H, W) float array with a small binary header."""
    arr = np.asarray(plane, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(PLANE_MAGIC)
        f.write(struct.pack("<III", PLANE_VERSION, w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_float_plane(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PLANE_MAGIC:
            raise ValueError(f"{path}: not a float plane file")
        version, w, h = struct.unpack("<III", f.read(12))
        if version != PLANE_VERSION:
            raise ValueError(f"unsupported plane version {version}")
        return np.frombuffer(f.read(h * w * 4), dtype="<f4").reshape(h, w).astype(np.float64)


def write_points(path, points: np.ndarray) -> None:
    """Write an (N, 7) array of (x, y, z, r, g, b, source_flag) records."""
    arr = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 7))
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def read_points(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 28 != 0:
        raise ValueError(f"{path}: truncated point records")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 7).astype(np.float64)


def points_to_colored(arr: np.ndarray) -> list[ColoredPoint]:
    out = []
    for row in arr:
        src = PointSource.SFM if row[6] > 0.5 else PointSource.LIDAR
        out.append(ColoredPoint(row[:3].copy(), row[3:6].copy(), src))
    return out


def write_pose(path, pose: CameraPose) -> None:
    mat = np.concatenate([pose.rotation_wc, pose.translation_wc[:, None]], axis=1)
    lines = [" ".join(f"{v:.17g}" for v in row) for row in mat]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose(path) -> CameraPose:
    rows = [[float(v) for v in line.split()]
            for line in Path(path).read_text().strip().splitlines()]
    mat = np.array(rows)
    if mat.shape != (3, 4):
        raise ValueError(f"{path}: expected a 3x4 pose matrix")
    return CameraPose(mat[:, :3], mat[:, 3])


def write_manifest(path, values: dict) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: bad manifest line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Dataset:
    """Reader for the on-disk dataset layout."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.txt"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.txt under {self.root}")
        self.manifest = read_manifest(manifest_path)
        self.n_frames = int(self.manifest["frame_count"])
        self.intrinsics = CameraIntrinsics(
            fx=float(self.manifest["fx"]), fy=float(self.manifest["fy"]),
            cx=float(self.manifest["cx"]), cy=float(self.manifest["cy"]),
            width=int(self.manifest["width"]), height=int(self.manifest["height"]))

    def frame_dir(self, i: int) -> Path:
        return self.root / "frames" / f"{i:05d}"

    def load_frame(self, i: int, with_points: bool = True) -> CameraFrame:
        d = self.frame_dir(i)
        image = read_ppm(d / "image.ppm")
        pose = read_pose(d / "pose.txt")
        points = []
        if with_points:
            for name in ("lidar.bin", "sfm.bin"):
                p = d / name
                if p.exists() and p.stat().st_size:
                    points.extend(points_to_colored(read_points(p)))
        return CameraFrame(pose=pose, intrinsics=self.intrinsics, image=image,
                           points=points, frame_index=i)
