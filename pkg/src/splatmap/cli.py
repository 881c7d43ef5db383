"""Command-line entry points: dataset generation, mapping runs, rendering,
evaluation, gradient checks, and benchmarks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bench, dataio, report
from .dataio import Dataset
from .gradcheck import build_gradcheck_scene, check_scene
from .loss import ExposureAffine, apply_exposure
from .mapper import Mapper, MapperConfig, run_pipeline
from .metrics import psnr_8bit, ssim_metric
from .scene import GaussianMap
from .sim import GenerateConfig, generate_dataset

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Run options; parseable from key = value config files, overridable by
    CLI flags."""

    dataset: str = ""
    output: str = "out"
    seed: int = 0
    precision: int = 32             # 32 or 64
    deterministic: bool = True
    threads: int = 1
    novel_stride: int = 10          # every stride-th frame held out; 0 = none
    # mapper settings
    seed_opacity: float = 0.1
    sky_opacity: float = 0.7
    sky_count: int = 100_000
    sky_radius: float = 1e4
    mask_threshold: float = 0.99
    replay_keyframes: int = 100
    loss_lambda: float = 0.2
    iterations_per_keyframe: int = 1
    keyframe_interval: int = 5
    near: float = 0.01
    frustum_margin: float = 0.1
    capacity: int = 4_000_000
    tile_size: int = 16
    sky_enabled: bool = True
    exposure_mode: str = "per_keyframe"
    early_termination: bool = True
    scene_extent: float = 0.0
    lr_position: float = 1.6e-4
    lr_sh0: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_exposure: float = 1e-2
    # dataset generation settings
    scene: str = "room"
    n_frames: int = 50
    width: int = 160
    height: int = 120
    fx: float = 130.0
    fy: float = 130.0
    lidar_pattern: str = "solid_state"
    lidar_rays: int = 20000
    lidar_noise: float = 0.0
    n_l: int = 10
    sfm_anchors: int = 800
    sfm_noise_px: float = 0.5
    n_k: int = 11
    n_t: int = 9
    exposure_gain_min: float = 1.0
    exposure_gain_max: float = 1.0
    # gradcheck settings
    gradcheck_scenes: int = 20
    gradcheck_gaussians: int = 20
    gradcheck_image: int = 24
    gradcheck_epsilon: float = 1e-5
    # bench settings
    bench_reps: int = 10
    bench_scale: float = 1.0
    bench_workloads: str = "forward,backward,culling,adam"

    def mapper_config(self) -> MapperConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(MapperConfig)}
        return MapperConfig(**kw)

    def generate_config(self) -> GenerateConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(GenerateConfig)}
        return GenerateConfig(**kw)

    @property
    def dtype(self):
        if self.precision == 32:
            return np.float32
        if self.precision == 64:
            return np.float64
        raise UsageError(f"precision must be 32 or 64, got {self.precision}")


def _coerce(value: str, target_type):
    if target_type is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"bad boolean value {value!r}")
    return target_type(value)


def parse_config_file(path) -> dict:
    """key = value lines; '#' starts a comment."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    field_map = {f.name: f for f in fields(RunConfig)}
    if getattr(args, "config", None):
        for key, val in parse_config_file(args.config).items():
            if key not in field_map:
                raise UsageError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(val, type(getattr(cfg, key))))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in field_map:
            raise UsageError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(val, type(getattr(cfg, key))))
    for name in ("dataset", "output", "seed", "threads"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    return cfg


# --- subcommands --------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    if not cfg.output:
        raise UsageError("generate requires an output directory")
    gen = cfg.generate_config()
    gen.seed = cfg.seed
    try:
        manifest = generate_dataset(cfg.output, gen)
    except ValueError as e:
        raise DataError(str(e)) from e
    print(f"wrote {manifest['frame_count']} frames to {cfg.output}")
    return EXIT_OK


def _split_views(n_frames: int, stride: int):
    if stride and stride > 0:
        novel = [i for i in range(n_frames) if i % stride == stride - 1]
    else:
        novel = []
    train = [i for i in range(n_frames) if i not in set(novel)]
    return train, novel


def _exposure_for_view(mapper: Mapper, ordinal: int) -> ExposureAffine:
    """Exposure of the most recent keyframe at or before this train ordinal."""
    if mapper.cfg.exposure_mode == "off" or not mapper.store.entries:
        return ExposureAffine.identity()
    kf_slot = min(ordinal // mapper.cfg.keyframe_interval,
                  len(mapper.store.entries) - 1)
    return mapper.store.entries[kf_slot].exposure


def _render_views(mapper: Mapper, ds: Dataset, indices, kinds, out_dir: Path,
                  threads: int, ordinals=None):
    """Render views, write images, and compute metrics rows."""
    rows = []
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(pos):
        idx = indices[pos]
        frame = ds.load_frame(idx, with_points=False)
        _, _, targets = mapper.render_view(frame.pose, frame.intrinsics)
        if kinds[pos] == "train" and ordinals is not None:
            E = _exposure_for_view(mapper, ordinals[pos])
        else:
            E = ExposureAffine.identity()
        compensated = np.clip(apply_exposure(E, targets.color), 0.0, 1.0)
        return idx, compensated, targets, frame.image

    results = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(indices))))
    else:
        results = [work(i) for i in range(len(indices))]

    for pos, (idx, img, targets, gt) in enumerate(results):
        kind = kinds[pos]
        sub = out_dir / kind
        sub.mkdir(parents=True, exist_ok=True)
        dataio.write_ppm(sub / f"{idx:05d}.ppm", img)
        dataio.write_float_plane(sub / f"{idx:05d}_depth.bin", targets.depth)
        dataio.write_float_plane(sub / f"{idx:05d}_opacity.bin", targets.opacity)
        rows.append({"view_index": idx, "kind": kind,
                     "psnr": psnr_8bit(img, gt), "ssim": ssim_metric(img, gt)})
    return rows


def _metric_averages(rows):
    averages = {}
    for kind in ("train", "novel"):
        sel = [r for r in rows if r["kind"] == kind]
        if sel:
            averages[kind] = (float(np.mean([r["psnr"] for r in sel])),
                              float(np.mean([r["ssim"] for r in sel])))
    return averages


def cmd_map(cfg: RunConfig) -> int:
    if not cfg.dataset:
        raise UsageError("map requires --dataset")
    try:
        ds = Dataset(cfg.dataset)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"malformed dataset: {e}") from e
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)

    train_idx, novel_idx = _split_views(ds.n_frames, cfg.novel_stride)
    mapper = Mapper(cfg.mapper_config(), seed=cfg.seed, dtype=cfg.dtype)

    def frames():
        for ordinal, idx in enumerate(train_idx):
            frame = ds.load_frame(idx)
            frame.frame_index = idx
            frame.is_keyframe = ordinal % cfg.keyframe_interval == 0
            yield frame

    run_pipeline(frames(), mapper)

    report.write_training_log(out / "training_log.csv", mapper.training_log)
    report.plot_training_curves(out / "training_curves.png", mapper.training_log)
    mapper.save_checkpoint(out / "checkpoint")

    indices = train_idx + novel_idx
    kinds = ["train"] * len(train_idx) + ["novel"] * len(novel_idx)
    ordinals = list(range(len(train_idx))) + [0] * len(novel_idx)
    rows = _render_views(mapper, ds, indices, kinds, out / "renders",
                         cfg.threads, ordinals)
    averages = _metric_averages(rows)
    report.write_metrics_csv(out / "metrics.csv", rows, averages)
    report.plot_view_metrics(out / "view_metrics.png", rows)
    for kind, (p, s) in averages.items():
        print(f"{kind}: mean PSNR {p:.2f} dB, mean SSIM {s:.4f} "
              f"({sum(1 for r in rows if r['kind'] == kind)} views)")
    print(f"map: {mapper.map.count} Gaussians ({mapper.map.sky_count} sky)")
    return EXIT_OK


def cmd_render(cfg: RunConfig, checkpoint: str, frames_arg: str) -> int:
    if not cfg.dataset:
        raise UsageError("render requires --dataset")
    try:
        ds = Dataset(cfg.dataset)
        ckpt = Path(checkpoint)
        map_path = ckpt / "map.bin" if ckpt.is_dir() else ckpt
        gmap = GaussianMap.load(map_path, dtype=cfg.dtype)
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from e
    mapper = Mapper(cfg.mapper_config(), seed=cfg.seed, dtype=cfg.dtype)
    mapper.map = gmap
    if frames_arg == "all":
        indices = list(range(ds.n_frames))
    else:
        try:
            indices = [int(s) for s in frames_arg.split(",") if s]
        except ValueError as e:
            raise UsageError(f"bad --frames list {frames_arg!r}") from e
    out = Path(cfg.output)
    rows = _render_views(mapper, ds, indices, ["render"] * len(indices),
                         out / "renders", cfg.threads)
    averages = {"render": (float(np.mean([r["psnr"] for r in rows])),
                           float(np.mean([r["ssim"] for r in rows])))}
    report.write_metrics_csv(out / "metrics.csv", rows, averages)
    print(f"rendered {len(indices)} views to {out / 'renders'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    worst = 0.0
    worst_desc = "none"
    lines = []
    for i in range(cfg.gradcheck_scenes):
        scene = build_gradcheck_scene(cfg.seed + i,
                                      n_gaussians=cfg.gradcheck_gaussians,
                                      image_size=cfg.gradcheck_image)
        rep = check_scene(scene, epsilon=cfg.gradcheck_epsilon)
        lines.append(f"scene {i}: worst {rep.worst_param} "
                     f"rel {rep.worst_rel_error:.3e} ({rep.n_checked} scalars)")
        if rep.worst_rel_error > worst:
            worst = rep.worst_rel_error
            worst_desc = f"scene {i} {rep.worst_param}"
    passed = worst <= 1e-4
    lines.append(f"worst overall: {worst_desc} rel {worst:.3e}")
    lines.append("PASS" if passed else "FAIL")
    text = "\n".join(lines)
    print(text)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text + "\n")
    return EXIT_OK if passed else EXIT_CHECK


def cmd_bench(cfg: RunConfig) -> int:
    workloads = [w.strip() for w in cfg.bench_workloads.split(",") if w.strip()]
    try:
        rows = bench.run_benchmarks(workloads=workloads, reps=cfg.bench_reps,
                                    seed=cfg.seed, scale=cfg.bench_scale)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    report.write_bench_csv(out / "bench.csv", rows)
    report.plot_benchmarks(out / "bench.png", rows)
    for r in rows:
        print(f"{r['workload']}: baseline {r['baseline_median_s']:.4f}s "
              f"accelerated {r['accelerated_median_s']:.4f}s "
              f"speedup {r['speedup']:.2f}x")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, renders: str) -> int:
    if not cfg.dataset:
        raise UsageError("eval requires --dataset")
    try:
        ds = Dataset(cfg.dataset)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"malformed dataset: {e}") from e
    rdir = Path(renders)
    if not rdir.is_dir():
        raise DataError(f"no such renders directory: {renders}")
    rows = []
    for kind_dir in sorted(d for d in rdir.iterdir() if d.is_dir()):
        for ppm in sorted(kind_dir.glob("[0-9]*.ppm")):
            idx = int(ppm.stem)
            if idx >= ds.n_frames:
                raise DataError(f"render {ppm} has no dataset frame")
            img = dataio.read_ppm(ppm)
            gt = ds.load_frame(idx, with_points=False).image
            rows.append({"view_index": idx, "kind": kind_dir.name,
                         "psnr": psnr_8bit(img, gt),
                         "ssim": ssim_metric(img, gt)})
    if not rows:
        raise DataError(f"no .ppm renders found under {renders}")
    averages = {}
    for kind in sorted({r["kind"] for r in rows}):
        sel = [r for r in rows if r["kind"] == kind]
        averages[kind] = (float(np.mean([r["psnr"] for r in sel])),
                          float(np.mean([r["ssim"] for r in sel])))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    report.write_metrics_csv(out / "metrics.csv", rows, averages)
    report.plot_view_metrics(out / "view_metrics.png", rows)
    for kind, (p, s) in averages.items():
        print(f"{kind}: mean PSNR {p:.2f} dB, mean SSIM {s:.4f}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> _Parser:
    p = _Parser(prog="splatmap",
                description="Incremental Gaussian-splatting mapping on the CPU")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key")
        sp.add_argument("--dataset", help="dataset directory")
        sp.add_argument("--output", help="output directory")
        sp.add_argument("--seed", type=int, help="rng seed")
        sp.add_argument("--threads", type=int, help="worker thread count")

    common(sub.add_parser("generate", help="write a synthetic dataset"))
    common(sub.add_parser("map", help="run incremental mapping on a dataset"))
    sp = sub.add_parser("render", help="render views from a saved map")
    common(sp)
    sp.add_argument("--checkpoint", required=True,
                    help="checkpoint directory or map.bin")
    sp.add_argument("--frames", default="all",
                    help="comma-separated frame indices or 'all'")
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    common(sub.add_parser("bench", help="benchmark acceleration strategies"))
    sp = sub.add_parser("eval", help="metrics for existing renders")
    common(sp)
    sp.add_argument("--renders", required=True, help="directory of PPM renders")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        cfg = build_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "map":
            return cmd_map(cfg)
        if args.command == "render":
            return cmd_render(cfg, args.checkpoint, args.frames)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.renders)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
