"""Command-line surface wiring the toolkit's pieces together.

Every subcommand is a pure pipeline: the same inputs and seed produce the
same outputs.  Exit status is 0 on success, 1 with a one-line diagnostic on
a toolkit error, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import diffusion, gdf, io, synthetic
from .errors import SplatvolError
from .fitting import FitConfig, evaluate_views, fit
from .model import Camera
from .render import render


def _cmd_fit(args) -> int:
    dataset = io.load_dataset(args.dataset)
    if args.config:
        cfg = io.load_fit_config(args.config)
    else:
        cfg = FitConfig(total_iters=3000, resolution=32)
    if args.no_cps:
        cfg = dataclasses.replace(cfg, use_cps=False)
    if args.no_offsets:
        cfg = dataclasses.replace(cfg, optimize_offsets=False)
    result = fit(dataset, cfg)
    io.save_volume(result.volume, args.out)
    log_path = args.log if args.log else str(args.out) + ".log"
    io.write_metrics_log(log_path, result.metrics)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"fitted {cfg.total_iters} iters: loss {last.loss:.6f} "
              f"psnr {last.psnr:.2f} active {last.active_count}")
    print(f"wrote {args.out}")
    return 0


def _parse_pose(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise SplatvolError(f"--pose expects 'azimuth,elevation,radius', got '{text}'")
    az, el, radius = (float(p) for p in parts)
    return az, el, radius


def _cmd_render(args) -> int:
    volume = io.load_volume(args.vol)
    az, el, radius = _parse_pose(args.pose)
    az, el = math.radians(az), math.radians(el)
    eye = radius * np.array([math.cos(el) * math.cos(az),
                             math.cos(el) * math.sin(az),
                             math.sin(el)])
    cam = Camera.look_at(eye, width=args.width, height=args.height,
                         fov_x=math.radians(args.fov_deg))
    background = np.asarray([float(c) for c in args.background.split(",")])
    img = render(volume, cam, background)
    io.save_image(args.out, img.rgb)
    print(f"wrote {args.out}")
    return 0


def _cmd_extract_gdf(args) -> int:
    volume = io.load_volume(args.vol)
    field = gdf.extract_gdf(volume, args.opacity_floor)
    if args.check_oracle:
        reference = gdf.gdf_oracle(volume, args.opacity_floor)
        gap = float(np.abs(field.values - reference.values).max())
        print(f"oracle max deviation {gap:.3e}")
        if gap > 1e-6:
            raise SplatvolError(f"distance field deviates from oracle by {gap:.3e}")
    io.save_gdf(field, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    volume = io.load_volume(args.vol)
    dataset = io.load_dataset(args.dataset)
    rows = evaluate_views(volume, dataset)
    print(f"{'view':>4}  {'psnr':>8}  {'ssim':>7}  {'l1':>9}")
    for i, (l1, ssim_val, psnr_val) in enumerate(rows):
        print(f"{i:>4}  {psnr_val:>8.3f}  {ssim_val:>7.4f}  {l1:>9.6f}")
    mean_psnr = float(np.mean([r[2] for r in rows]))
    mean_ssim = float(np.mean([r[1] for r in rows]))
    print(f"mean  {mean_psnr:>8.3f}  {mean_ssim:>7.4f}")
    return 0


def _cmd_make_synthetic(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SplatvolError(f"cannot read scene spec {args.spec}: {exc}") from exc
    scene_spec = synthetic.SceneSpec(**spec.get("scene", {}))
    scene = synthetic.make_scene(scene_spec)
    synthetic.render_dataset(
        scene,
        view_count=spec.get("view_count", 72),
        radius=spec.get("radius", 2.4),
        resolution=spec.get("resolution", 128),
        fov_deg=spec.get("fov_deg", 60.0),
        background=spec.get("background", (1.0, 1.0, 1.0)),
        out_dir=args.out,
    )
    if spec.get("save_scene", True):
        io.save_volume(scene, Path(args.out) / "scene.gvol")
    print(f"wrote dataset to {args.out}")
    return 0


def _cmd_diffusion_demo(args) -> int:
    schedule = diffusion.build_schedule(args.steps)
    scene = synthetic.make_scene(synthetic.SceneSpec(
        seed=args.seed, gaussian_count=64, resolution=args.resolution))
    field = gdf.extract_gdf(scene, opacity_floor=0.05)
    x0 = diffusion.normalize_gdf(field)
    oracle = diffusion.OracleDenoiser(x0, schedule)
    recovered = diffusion.sample(oracle, None, schedule, args.seed,
                                 field.resolution, field.bounds)
    err = float(np.abs(recovered.values - np.maximum(field.values, 0.0)).max())
    again = diffusion.sample(oracle, None, schedule, args.seed,
                             field.resolution, field.bounds)
    deterministic = bool(np.array_equal(recovered.values, again.values))
    print(f"steps {args.steps}  oracle-inversion Linf {err:.4e}  "
          f"deterministic {deterministic}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatvol")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a volume to a posed image dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--no-cps", action="store_true",
                   help="disable candidate-pool refinement (offsets only)")
    p.add_argument("--no-offsets", action="store_true",
                   help="freeze centers to their grid points")
    p.add_argument("--log", default=None, help="metrics log path")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("render", help="render a volume from an orbit pose")
    p.add_argument("vol")
    p.add_argument("--pose", required=True, help="azimuth_deg,elevation_deg,radius")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--fov-deg", type=float, default=60.0)
    p.add_argument("--background", default="1,1,1")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("extract-gdf", help="extract the coarse distance field")
    p.add_argument("vol")
    p.add_argument("--out", required=True)
    p.add_argument("--opacity-floor", type=float, default=0.05)
    p.add_argument("--check-oracle", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_extract_gdf)

    p = sub.add_parser("metrics", help="PSNR/SSIM table of a volume vs a dataset")
    p.add_argument("vol")
    p.add_argument("dataset")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("make-synthetic", help="generate a synthetic posed dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_synthetic)

    p = sub.add_parser("diffusion-demo", help="oracle-inversion sampling demo")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=8)
    p.set_defaults(func=_cmd_diffusion_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (SplatvolError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
