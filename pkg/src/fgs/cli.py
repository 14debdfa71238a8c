"""Command line front end.

Subcommands: `run` (track and map a sequence), `synth` (write a synthetic
RGB-D dataset), `eval` (absolute trajectory error between two trajectory
files), `render` (rasterize a saved map from a given pose).

Exit codes: 0 success, 2 dataset/configuration error, 3 tracking
divergence, 4 numerical failure.
"""

import argparse
import sys

import numpy as np

from .config import (
    CONFIG_SCHEMA,
    PipelineConfig,
    add_schema_flags,
    read_config_file,
    resolve,
)
from .core import CameraIntrinsics, Pose
from .datasets import SceneSpec, read_scene_spec, write_synthetic_dataset
from .errors import (
    DatasetError,
    InsufficientData,
    NumericalError,
    TrackingDivergence,
)
from .imgio import write_color_png, write_depth_fgsd
from .metrics import ate_rmse, parse_trajectory
from .pipeline import run_slam, write_artifacts
from .ply import read_map_ply
from .renderer import render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgs",
        description="Frequency-guided gaussian-splatting SLAM for RGB-D sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="track and map an RGB-D sequence")
    run_p.add_argument("--dataset", required=True, help="dataset directory")
    run_p.add_argument("--format", choices=("tum", "synthetic"), default="tum",
                       help="dataset layout (default tum)")
    run_p.add_argument("--config", help="key = value configuration file")
    run_p.add_argument("--out", required=True, help="artifact output directory")
    add_schema_flags(run_p)

    synth_p = sub.add_parser("synth", help="write a synthetic RGB-D dataset")
    synth_p.add_argument("--spec", help="scene description file (key = value)")
    synth_p.add_argument("--frames", type=int, default=50,
                         help="number of frames (default 50)")
    synth_p.add_argument("--seed", type=int, default=0,
                         help="texture/noise seed (default 0)")
    synth_p.add_argument("--out", required=True, help="dataset output directory")

    eval_p = sub.add_parser(
        "eval", help="absolute trajectory error of an estimate vs ground truth")
    eval_p.add_argument("--traj", required=True, help="estimated trajectory file")
    eval_p.add_argument("--gt", required=True, help="ground-truth trajectory file")

    render_p = sub.add_parser("render", help="render a saved gaussian map")
    render_p.add_argument("--map", dest="map_path", required=True,
                          help="gaussian map .ply file")
    render_p.add_argument("--pose", required=True,
                          help="'tx ty tz qx qy qz qw' (leading timestamp allowed)")
    render_p.add_argument("--out", required=True, help="output color PNG")
    render_p.add_argument("--width", type=int, default=640)
    render_p.add_argument("--height", type=int, default=480)
    render_p.add_argument("--focal", type=float, default=525.0,
                          help="focal length in pixels (default 525)")
    render_p.add_argument("--depth-out", dest="depth_out",
                          help="also write the float depth as an .fgsd blob")
    return parser


def parse_pose_arg(text: str) -> Pose:
    """A trajectory-style pose string into a Pose (quaternion normalized)."""
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ValueError(f"pose: {exc}") from exc
    if len(vals) == 8:  # full trajectory line; drop the timestamp
        vals = vals[1:]
    if len(vals) != 7:
        raise ValueError("pose needs 7 numbers: tx ty tz qx qy qz qw")
    tx, ty, tz, qx, qy, qz, qw = vals
    quat = np.array([qw, qx, qy, qz])
    norm = np.linalg.norm(quat)
    if norm < 1e-12:
        raise ValueError("pose quaternion has zero norm")
    return Pose(quat / norm, np.array([tx, ty, tz]))


def _cmd_run(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cli_values = {key: getattr(args, key) for key in CONFIG_SCHEMA}
    cfg = PipelineConfig(dataset=args.dataset, format=args.format, out=args.out,
                         **resolve(file_values, cli_values))
    result = run_slam(cfg)
    paths = write_artifacts(result, args.out)
    rep = result.report
    ate = "n/a" if rep.ate_rmse is None else f"{rep.ate_rmse:.4f} m"
    print(f"frames {len(result.trajectory)}  keyframes {len(result.keyframes)}  "
          f"dense {rep.dense_count}  sparse {rep.sparse_count}")
    print(f"psnr {rep.psnr_mean:.2f} dB  ssim {rep.ssim_mean:.4f}  "
          f"ate {ate}  fps {rep.fps:.2f}")
    print(f"artifacts in {paths['report.json'].parent}")
    if result.error == "tracking_divergence":
        print("fgs run: tracking diverged; artifacts cover the processed prefix",
              file=sys.stderr)
        return 3
    return 0


def _cmd_synth(args) -> int:
    spec = read_scene_spec(args.spec) if args.spec else SceneSpec()
    if args.frames < 1:
        raise ValueError("--frames must be >= 1")
    sequence, _ = write_synthetic_dataset(spec, args.frames, args.seed, args.out)
    print(f"wrote {len(sequence)} frames to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    try:
        estimate = parse_trajectory(args.traj)
        truth = parse_trajectory(args.gt)
    except OSError as exc:
        raise DatasetError(str(exc)) from exc
    value = ate_rmse(estimate, truth)
    print(f"ate_rmse_m {value:.6f}")
    return 0


def _cmd_render(args) -> int:
    try:
        gmap = read_map_ply(args.map_path)
    except OSError as exc:
        raise DatasetError(str(exc)) from exc
    pose = parse_pose_arg(args.pose)
    intr = CameraIntrinsics(fx=args.focal, fy=args.focal,
                            cx=args.width / 2.0, cy=args.height / 2.0,
                            width=args.width, height=args.height)
    out = render(gmap, pose, intr)
    write_color_png(out.color, args.out)
    if args.depth_out:
        write_depth_fgsd(out.depth, args.depth_out)
    print(f"wrote {args.out}")
    return 0


_HANDLERS = {"run": _cmd_run, "synth": _cmd_synth, "eval": _cmd_eval,
             "render": _cmd_render}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (DatasetError, InsufficientData, ValueError) as err:
        print(f"fgs {args.command}: {err}", file=sys.stderr)
        return 2
    except TrackingDivergence as err:
        print(f"fgs {args.command}: {err}", file=sys.stderr)
        return 3
    except NumericalError as err:
        print(f"fgs {args.command}: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
