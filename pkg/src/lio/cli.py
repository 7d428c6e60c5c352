"""Command-line front end: simulate, run, evaluate, inspect."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as lio_io
from .config import ConfigError, PipelineConfig
from .evaluation import ate, kitti_rel_error
from .pipeline import DatasetManifest, run_pipeline, simulate_dataset, write_outputs
from .sim import make_scenario


def _cmd_simulate(args) -> int:
    scenario = make_scenario(
        args.world,
        length=args.length,
        peak_speed=args.peak_speed,
        azimuth_steps=args.azimuth_steps,
    )
    manifest = simulate_dataset(scenario, args.out, seed=args.seed)
    print(f"wrote {len(manifest.scans)} scans to {args.out}")
    return 0


def _cmd_run(args) -> int:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.set:
        config.apply_overrides(args.set)
    if args.no_detection:
        config.detection_enabled = False
    if args.classifier:
        config.classifier = args.classifier
    config.validate()
    manifest = DatasetManifest.load(args.dataset)
    result = run_pipeline(manifest, config)
    write_outputs(result, args.out)
    print(result.report.to_text())
    print(f"outputs written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    est = lio_io.read_trajectory_tum(args.est)
    ref = lio_io.read_trajectory_tum(args.ref)
    if args.metric == "ate":
        report = ate(est, ref, max_dt=args.max_dt)
        text = report.to_text()
        summary = f"ate rmse {report.rmse:.4f} m, max {report.max:.4f} m"
    else:
        report = kitti_rel_error(est, ref, max_dt=args.max_dt)
        text = report.to_text()
        summary = f"relative translation error average {report.average:.3f} %"
    if args.out:
        lio_io.atomic_write_text(args.out, text)
        print(f"report written to {args.out}")
    else:
        print(text, end="")
    print(summary)
    return 0


def _cmd_inspect(args) -> int:
    positions, _ = lio_io.read_scan_bin(args.map)
    if len(positions) == 0:
        print("map is empty")
        return 0
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    voxel = 0.5
    keys = np.unique(np.floor(positions / voxel).astype(np.int64), axis=0)
    print(f"points: {len(positions)}")
    print(f"extent_min: {lo[0]:.2f} {lo[1]:.2f} {lo[2]:.2f}")
    print(f"extent_max: {hi[0]:.2f} {hi[1]:.2f} {hi[2]:.2f}")
    print(f"occupied_{voxel}m_voxels: {len(keys)}")
    print(f"mean_points_per_voxel: {len(positions) / len(keys):.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lio", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    p.add_argument("--world", required=True, help="preset: static_highway | dynamic_highway")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=float, default=300.0, help="path length in meters")
    p.add_argument("--peak-speed", type=float, default=16.7)
    p.add_argument("--azimuth-steps", type=int, default=900)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run the odometry/mapping pipeline on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-detection", action="store_true")
    p.add_argument("--classifier", choices=("heuristic", "oracle"), default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", help="compare trajectories (TUM format)")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metric", choices=("ate", "kitti"), default="ate")
    p.add_argument("--max-dt", type=float, default=0.02)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("inspect", help="print extent and density stats of a map export")
    p.add_argument("--map", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
