"""Incremental mapping: bootstrap from the first frame's points, sky-shell
initialization, keyframe cadence, opacity-masked expansion, and the
random-replay optimization loop."""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .adam import AdamState, ScalarAdam, adam_step
from .backward import backward_per_gaussian
from .forward import bin_and_sort, render
from .loss import ExposureAffine, apply_exposure, photometric_loss
from .metrics import psnr_8bit
from .projection import logit, project_gaussians, rgb_to_sh0
from .scene import (CameraFrame, CameraPose, ColoredPoint, Gaussian,
                    GaussianMap, frustum_mask)

log = logging.getLogger(__name__)


@dataclass
class MapperConfig:
    seed_opacity: float = 0.1           # opacity of point-seeded Gaussians
    sky_opacity: float = 0.7
    sky_count: int = 100_000
    sky_radius: float = 1e4
    mask_threshold: float = 0.99        # expansion mask: O < threshold
    replay_keyframes: int = 100         # keyframes sampled per optimization round
    loss_lambda: float = 0.2
    iterations_per_keyframe: int = 1    # optimization rounds per new keyframe
    keyframe_interval: int = 5
    near: float = 0.01
    frustum_margin: float = 0.1
    capacity: int = 4_000_000
    tile_size: int = 16
    sky_enabled: bool = True
    exposure_mode: str = "per_keyframe"  # per_keyframe | global | off
    early_termination: bool = True
    scene_extent: float = 0.0           # <= 0: derive from first-frame points
    lr_position: float = 1.6e-4         # scaled by scene extent
    lr_sh0: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_exposure: float = 1e-2

    def replace(self, **kw) -> "MapperConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return MapperConfig(**d)


@dataclass
class KeyframeEntry:
    frame: CameraFrame
    exposure: ExposureAffine
    exposure_opt: ScalarAdam


@dataclass
class KeyframeStore:
    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, frame: CameraFrame, lr_exposure: float) -> KeyframeEntry:
        if self.entries and frame.frame_index <= self.entries[-1].frame.frame_index:
            raise ValueError("keyframe indices must be strictly increasing")
        e = KeyframeEntry(frame, ExposureAffine.identity(),
                          ScalarAdam((3, 4), lr_exposure))
        self.entries.append(e)
        return e


def seed_gaussian_from_point(point: ColoredPoint, frame: CameraFrame,
                             cfg: MapperConfig) -> Gaussian:
    """Seed one Gaussian at a point: base color from the point's RGB, opacity
    seed_opacity, identity rotation, isotropic scale (depth / fx)."""
    pc = frame.pose.rotation_wc @ point.position_w + frame.pose.translation_wc
    d = pc[2]
    if d <= cfg.near:
        raise ValueError("point is behind the camera")
    scale = d / frame.intrinsics.fx
    sh = np.zeros((16, 3))
    sh[0] = rgb_to_sh0(point.rgb)
    return Gaussian(
        position=point.position_w,
        log_scale=np.full(3, np.log(scale)),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        opacity_logit=logit(cfg.seed_opacity),
        sh_coeffs=sh,
        is_sky=False,
    )


def _seed_arrays(positions: np.ndarray, rgbs: np.ndarray, frame: CameraFrame,
                 cfg: MapperConfig):
    """Vectorized seeding; callers have already filtered depth > near."""
    n = positions.shape[0]
    pc = positions @ frame.pose.rotation_wc.T + frame.pose.translation_wc
    scale = pc[:, 2] / frame.intrinsics.fx
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rgb_to_sh0(rgbs)
    opac = np.full(n, logit(cfg.seed_opacity))
    return positions, log_scales, rotations, opac, sh, np.zeros(n, dtype=bool)


SKY_SCALE_FACTOR = 1.1


def init_sky(cfg: MapperConfig, rng: np.random.Generator) -> list[Gaussian]:
    """White Gaussians sampled uniformly on the upper hemisphere shell, each
    scaled from the distance to its nearest neighbor.

    The factor on the neighbor distance calibrates the shell's per-ray
    optical depth: the bootstrap sky must composite well above 0.5 opacity
    (so the sky actually renders) yet below the expansion mask threshold
    (so sky coverage never blocks seeding); 1.1 lands ~98% of sky pixels in
    that band while random-sampling voids keep a small tail below it.
    """
    n = int(cfg.sky_count)
    if n == 0:
        return []
    R = cfg.sky_radius
    z = rng.uniform(0.0, 1.0, n) * R
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    rxy = np.sqrt(np.maximum(R * R - z * z, 0.0))
    pos = np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)
    if n == 1:
        scales = np.array([R * np.sqrt(4.0 * np.pi / n)])
    else:
        dist, _ = cKDTree(pos).query(pos, k=2)
        scales = SKY_SCALE_FACTOR * dist[:, 1]
    sh0 = rgb_to_sh0(np.array([1.0, 1.0, 1.0]))
    out = []
    ol = logit(cfg.sky_opacity)
    for i in range(n):
        sh = np.zeros((16, 3))
        sh[0] = sh0
        out.append(Gaussian(
            position=pos[i],
            log_scale=np.full(3, np.log(scales[i])),
            rotation=np.array([1.0, 0.0, 0.0, 0.0]),
            opacity_logit=ol,
            sh_coeffs=sh,
            is_sky=True,
        ))
    return out


def _sky_arrays(cfg: MapperConfig, rng: np.random.Generator):
    gs = init_sky(cfg, rng)
    n = len(gs)
    if n == 0:
        z = np.zeros
        return z((0, 3)), z((0, 3)), z((0, 4)), z((0,)), z((0, 16, 3)), z((0,), dtype=bool)
    return (np.array([g.position for g in gs]),
            np.array([g.log_scale for g in gs]),
            np.array([g.rotation for g in gs]),
            np.array([g.opacity_logit for g in gs]),
            np.array([g.sh_coeffs for g in gs]),
            np.ones(n, dtype=bool))


class Mapper:
    """Consumes posed frames in order and grows/optimizes the Gaussian map."""

    def __init__(self, cfg: MapperConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.map = GaussianMap(capacity=cfg.capacity, dtype=dtype)
        self.store = KeyframeStore()
        self.rng = np.random.default_rng(seed)
        self.adam: AdamState | None = None
        self.point_buffer: list[np.ndarray] = []   # (K, 6) xyzrgb chunks
        self.frames_received = 0
        self.last_frame_index = -1
        self.global_iteration = 0
        self.training_log: list[dict] = []
        self.scene_extent = cfg.scene_extent

    # --- rendering helpers ---------------------------------------------

    def _params(self) -> dict:
        return {"position": self.map.positions, "log_scale": self.map.log_scales,
                "rotation": self.map.rotations, "opacity_logit": self.map.opacity_logits,
                "sh": self.map.sh_coeffs}

    def render_view(self, pose: CameraPose, intr, include_sky: bool = True):
        """Render one view of the current map; returns (screen, grid, targets)."""
        select = None if include_sky else ~self.map.is_sky
        screen = project_gaussians(
            self.map.positions, self.map.log_scales, self.map.rotations,
            self.map.opacity_logits, self.map.sh_coeffs, pose, intr,
            near=self.cfg.near, select=select)
        grid = bin_and_sort(screen, intr, tile_size=self.cfg.tile_size)
        targets = render(grid, screen, intr,
                         early_termination=self.cfg.early_termination)
        return screen, grid, targets

    # --- map growth ------------------------------------------------------

    def bootstrap(self, first_frame: CameraFrame) -> None:
        if self.map.count != 0:
            raise RuntimeError("bootstrap requires an empty map")
        pts = first_frame.points
        if len(pts) == 0:
            log.warning("bootstrap frame has no points; map starts with sky only")
        else:
            positions = np.array([p.position_w for p in pts])
            rgbs = np.array([p.rgb for p in pts])
            pc = positions @ first_frame.pose.rotation_wc.T + first_frame.pose.translation_wc
            ok = pc[:, 2] > self.cfg.near
            self.map.append_arrays(*_seed_arrays(positions[ok], rgbs[ok],
                                                 first_frame, self.cfg))
            if self.scene_extent <= 0:
                lo = positions[ok].min(axis=0)
                hi = positions[ok].max(axis=0)
                self.scene_extent = float(np.linalg.norm(hi - lo)) or 1.0
        if self.scene_extent <= 0:
            self.scene_extent = 1.0
        if self.cfg.sky_enabled and self.cfg.sky_count > 0:
            self.map.append_arrays(*_sky_arrays(self.cfg, self.rng))
        self.adam = AdamState(self.map.count, self._lrs(), dtype=self.dtype)

    def _lrs(self) -> dict:
        c = self.cfg
        return {"position": c.lr_position * self.scene_extent, "sh0": c.lr_sh0,
                "sh_rest": c.lr_sh_rest, "opacity_logit": c.lr_opacity,
                "log_scale": c.lr_scale, "rotation": c.lr_rotation}

    def expansion_mask(self, keyframe: CameraFrame) -> np.ndarray:
        """Boolean (H, W) mask of unreliable pixels: rendered opacity < tau."""
        if self.map.count == 0:
            raise RuntimeError("expansion mask requires a non-empty map")
        _, _, targets = self.render_view(keyframe.pose, keyframe.intrinsics)
        return targets.opacity < self.dtype.type(self.cfg.mask_threshold)

    def expand(self, keyframe: CameraFrame, merged_points) -> int:
        """Seed new Gaussians from points landing on mask-true pixels."""
        if len(merged_points) == 0:
            return 0
        mask = self.expansion_mask(keyframe)
        if isinstance(merged_points, np.ndarray):
            positions = merged_points[:, :3]
            rgbs = merged_points[:, 3:6]
        else:
            positions = np.array([p.position_w for p in merged_points])
            rgbs = np.array([p.rgb for p in merged_points])
        intr = keyframe.intrinsics
        pc = positions @ keyframe.pose.rotation_wc.T + keyframe.pose.translation_wc
        z = pc[:, 2]
        ok = z > self.cfg.near
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * pc[:, 0] / z + intr.cx
            v = intr.fy * pc[:, 1] / z + intr.cy
        col = np.floor(u + 0.5).astype(np.int64)
        row = np.floor(v + 0.5).astype(np.int64)
        ok &= (col >= 0) & (col < intr.width) & (row >= 0) & (row < intr.height)
        sel = np.nonzero(ok)[0]
        sel = sel[mask[row[sel], col[sel]]]
        if sel.size == 0:
            return 0
        self.map.append_arrays(*_seed_arrays(positions[sel], rgbs[sel],
                                             keyframe, self.cfg))
        if self.adam is not None:
            self.adam.resize(self.map.count)
        return int(sel.size)

    # --- optimization ----------------------------------------------------

    def optimize_map(self) -> list[dict]:
        """One optimization round: sample, shuffle, and replay keyframes."""
        n_store = len(self.store)
        if n_store == 0:
            raise RuntimeError("optimize_map requires at least one keyframe")
        k = min(self.cfg.replay_keyframes, n_store)
        sel = self.rng.choice(n_store, size=k, replace=False)
        self.rng.shuffle(sel)
        entries = []
        for i in sel:
            entries.append(self._optimize_step(self.store.entries[i]))
        self.training_log.extend(entries)
        return entries

    def _optimize_step(self, entry: KeyframeEntry) -> dict:
        kf = entry.frame
        screen, grid, targets = self.render_view(kf.pose, kf.intrinsics)
        exposure_on = self.cfg.exposure_mode != "off"
        E = entry.exposure if exposure_on else ExposureAffine.identity()
        loss, d_rendered, d_E, parts = photometric_loss(
            targets.color, kf.image.astype(self.dtype), E, self.cfg.loss_lambda)
        buf = backward_per_gaussian(targets, d_rendered, screen, grid, self.map,
                                    kf.pose, kf.intrinsics,
                                    early_termination=self.cfg.early_termination)
        buf.d_exposure = d_E
        active = frustum_mask(kf.pose, kf.intrinsics, self.map.positions,
                              near=self.cfg.near, margin=self.cfg.frustum_margin)
        grads = {"position": buf.d_position, "log_scale": buf.d_log_scale,
                 "rotation": buf.d_rotation, "opacity_logit": buf.d_opacity_logit,
                 "sh": buf.d_sh}
        adam_step(self._params(), grads, self.adam, active=np.nonzero(active)[0])
        if exposure_on:
            entry.exposure_opt.step(entry.exposure.matrix, d_E)
        self.global_iteration += 1
        compensated = np.clip(apply_exposure(E, targets.color), 0.0, 1.0)
        entry_log = {
            "iteration": self.global_iteration,
            "keyframe": kf.frame_index,
            "l1": parts["l1"],
            "dssim": parts["dssim"],
            "loss": loss,
            "psnr": psnr_8bit(compensated, kf.image),
        }
        return entry_log

    # --- frame intake ------------------------------------------------------

    def process_frame(self, frame: CameraFrame) -> None:
        """Bootstrap on the first frame; buffer points on non-keyframes; on
        keyframes merge, expand, register, and optimize."""
        if frame.frame_index <= self.last_frame_index:
            raise RuntimeError(
                f"out-of-order frame index {frame.frame_index} "
                f"(last {self.last_frame_index})")
        self.last_frame_index = frame.frame_index
        ordinal = self.frames_received
        self.frames_received += 1
        is_kf = ordinal % self.cfg.keyframe_interval == 0

        if ordinal == 0:
            self.bootstrap(frame)
            entry = self.store.add(frame, self.cfg.lr_exposure)
            if self.cfg.exposure_mode == "global" and len(self.store) > 1:
                entry.exposure = self.store.entries[0].exposure
            for _ in range(self.cfg.iterations_per_keyframe):
                self.optimize_map()
            return

        pts = frame.points
        if pts:
            chunk = np.empty((len(pts), 6))
            for i, p in enumerate(pts):
                chunk[i, :3] = p.position_w
                chunk[i, 3:] = p.rgb
            self.point_buffer.append(chunk)

        if not is_kf:
            return

        merged = (np.concatenate(self.point_buffer)
                  if self.point_buffer else np.zeros((0, 6)))
        self.point_buffer = []
        added = self.expand(frame, merged)
        log.debug("keyframe %d: expansion added %d Gaussians", frame.frame_index, added)
        entry = self.store.add(frame, self.cfg.lr_exposure)
        if self.cfg.exposure_mode == "global":
            entry.exposure = self.store.entries[0].exposure
            entry.exposure_opt = self.store.entries[0].exposure_opt
        for _ in range(self.cfg.iterations_per_keyframe):
            self.optimize_map()

    # --- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.map.save(path / "map.bin")
        (path / "map_summary.txt").write_text(self.map.summary())
        arrays = {} if self.adam is None else self.adam.to_dict()
        arrays = {f"adam_{k}": v for k, v in arrays.items()}
        if self.point_buffer:
            arrays["point_buffer"] = np.concatenate(self.point_buffer)
        n_kf = len(self.store)
        if n_kf:
            arrays["kf_indices"] = np.array(
                [e.frame.frame_index for e in self.store.entries])
            arrays["kf_images"] = np.stack(
                [e.frame.image for e in self.store.entries]).astype(np.float32)
            arrays["kf_rotations"] = np.stack(
                [e.frame.pose.rotation_wc for e in self.store.entries])
            arrays["kf_translations"] = np.stack(
                [e.frame.pose.translation_wc for e in self.store.entries])
            arrays["kf_intrinsics"] = np.array(
                [[e.frame.intrinsics.fx, e.frame.intrinsics.fy,
                  e.frame.intrinsics.cx, e.frame.intrinsics.cy,
                  e.frame.intrinsics.width, e.frame.intrinsics.height]
                 for e in self.store.entries])
            arrays["kf_exposures"] = np.stack(
                [e.exposure.matrix for e in self.store.entries])
            arrays["kf_exp_m"] = np.stack(
                [e.exposure_opt.m for e in self.store.entries])
            arrays["kf_exp_v"] = np.stack(
                [e.exposure_opt.v for e in self.store.entries])
            arrays["kf_exp_t"] = np.array(
                [e.exposure_opt.t for e in self.store.entries])
        np.savez_compressed(path / "state.npz", **arrays)
        meta = {
            "frames_received": self.frames_received,
            "last_frame_index": self.last_frame_index,
            "global_iteration": self.global_iteration,
            "scene_extent": self.scene_extent,
            "rng_state": self.rng.bit_generator.state,
            "dtype": self.dtype.name,
        }
        (path / "mapper.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load_checkpoint(cls, path, cfg: MapperConfig) -> "Mapper":
        from .scene import CameraIntrinsics

        path = Path(path)
        meta = json.loads((path / "mapper.json").read_text())
        m = cls(cfg, seed=0, dtype=np.dtype(meta["dtype"]))
        m.map = GaussianMap.load(path / "map.bin", capacity=cfg.capacity,
                                 dtype=m.dtype)
        m.frames_received = meta["frames_received"]
        m.last_frame_index = meta["last_frame_index"]
        m.global_iteration = meta["global_iteration"]
        m.scene_extent = meta["scene_extent"]
        m.rng.bit_generator.state = meta["rng_state"]
        with np.load(path / "state.npz") as data:
            adam_keys = {k[5:]: data[k] for k in data.files if k.startswith("adam_")}
            if adam_keys:
                m.adam = AdamState.from_dict(adam_keys, m._lrs(), dtype=m.dtype)
            if "point_buffer" in data.files:
                m.point_buffer = [data["point_buffer"]]
            if "kf_indices" in data.files:
                for i, fidx in enumerate(data["kf_indices"]):
                    intr6 = data["kf_intrinsics"][i]
                    frame = CameraFrame(
                        pose=CameraPose(data["kf_rotations"][i],
                                        data["kf_translations"][i]),
                        intrinsics=CameraIntrinsics(
                            fx=float(intr6[0]), fy=float(intr6[1]),
                            cx=float(intr6[2]), cy=float(intr6[3]),
                            width=int(intr6[4]), height=int(intr6[5])),
                        image=data["kf_images"][i],
                        points=[], frame_index=int(fidx), is_keyframe=True)
                    entry = KeyframeEntry(frame,
                                          ExposureAffine(data["kf_exposures"][i]),
                                          ScalarAdam((3, 4), cfg.lr_exposure))
                    entry.exposure_opt.m = data["kf_exp_m"][i]
                    entry.exposure_opt.v = data["kf_exp_v"][i]
                    entry.exposure_opt.t = int(data["kf_exp_t"][i])
                    m.store.entries.append(entry)
                if cfg.exposure_mode == "global":
                    for e in m.store.entries[1:]:
                        e.exposure = m.store.entries[0].exposure
                        e.exposure_opt = m.store.entries[0].exposure_opt
        return m


# --- frame queue (the in-process transport contract) -------------------------

FRAME_QUEUE_SIZE = 8


def run_pipeline(frames, mapper: Mapper, queue_size: int = FRAME_QUEUE_SIZE,
                 on_frame=None) -> None:
    """Stream frames through a bounded queue into the mapper.

    The producer blocks when the queue is full (back-pressure); the mapper
    consumes sequentially, so results match direct iteration exactly.
    """
    q: queue.Queue = queue.Queue(maxsize=queue_size)
    sentinel = object()
    errors: list[BaseException] = []

    def produce():
        try:
            for f in frames:
                q.put(f)
        except BaseException as e:  # surfaced on the consumer side
            errors.append(e)
        finally:
            q.put(sentinel)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is sentinel:
            break
        mapper.process_frame(item)
        if on_frame is not None:
            on_frame(item)
    t.join()
    if errors:
        raise errors[0]
