"""Command-line entry point.

Every subcommand works on a dataset directory written by ``synth`` and an
output directory owned by the run. Exit codes: 0 success, 1 invalid input
or configuration, 2 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .field import DenseGridField, render_view_downsampled
from .geometry import InvalidInputError, Ray
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    _Inputs,
    _latest_poses,
    config_to_toml,
    emit_report,
    load_config,
    run_pipeline,
    run_stage,
    stage_synth,
    write_manifest,
)
from .sampling import place_ray_samples

logger = logging.getLogger("mvcg")

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2

# subcommand -> pipeline stage
STAGE_COMMANDS = {
    "vote": "vote",
    "ba": "ba",
    "refine": "refine",
    "fit-field": "fit_field",
    "fuse": "fuse",
    "complete": "complete",
    "eval": "eval",
}


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    over = {}
    if args.dataset:
        over["dataset_dir"] = args.dataset
    if args.output:
        over["output_dir"] = args.output
    if args.seed is not None:
        over["seed"] = args.seed
    return dataclasses.replace(cfg, **over)


def cmd_synth(cfg: PipelineConfig, args) -> int:
    synth = cfg.synth
    if args.scene:
        synth = dataclasses.replace(synth, scene=args.scene)
    if args.views:
        synth = dataclasses.replace(synth, n_views=args.views)
    info = stage_synth(dataclasses.replace(cfg, synth=synth))
    print(f"wrote {info['views']} views to {cfg.dataset}")
    return EXIT_OK


def cmd_stage(cfg: PipelineConfig, args) -> int:
    entry = run_stage(cfg, STAGE_COMMANDS[args.command])
    write_manifest(cfg, [entry])
    if args.command == "eval":
        print(json.dumps(io.read_json(cfg.out / "metrics.json"), indent=2))
    else:
        print(json.dumps(entry["info"], indent=2, default=str))
    return EXIT_OK


def cmd_render(cfg: PipelineConfig, args) -> int:
    inp = _Inputs("render", cfg)
    K = inp.K()
    path = Path(args.field) if args.field else cfg.out / "field" / "initial.dgf"
    fld = DenseGridField.load(inp.need(path))
    latest = _latest_poses(inp)
    traj = inp.traj(latest if latest is not None else cfg.dataset / "poses_init.tum")
    if not 0 <= args.view < len(traj.poses):
        raise InvalidInputError(f"view {args.view} out of range (0..{len(traj.poses) - 1})")
    rgb, depth, opacity = render_view_downsampled(fld, traj.poses[args.view], K, cfg.render)
    out = Path(args.out) if args.out else cfg.out / "render"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.view:03d}"
    io.write_image(out / f"{stem}.png", rgb)
    io.write_pfm(out / f"{stem}_depth.pfm", np.nan_to_num(depth, nan=0.0))
    io.write_pfm(out / f"{stem}_opacity.pfm", opacity)
    print(f"rendered view {args.view} to {out}")
    return EXIT_OK


def cmd_sample(cfg: PipelineConfig, args) -> int:
    if not args.near < args.far:
        raise InvalidInputError("near must be smaller than far")
    if args.sigma <= 0 or args.count <= 0:
        raise InvalidInputError("sigma and count must be positive")
    ray = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), args.near, args.far)
    _, t = place_ray_samples(ray, args.d_hat, args.sigma, args.count, seed=cfg.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["j", "t"])
        for j, v in enumerate(t):
            w.writerow([j, repr(float(v))])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig, args) -> int:
    run = run_pipeline(cfg, synth=args.synth)
    text, data = emit_report(run)
    print(json.dumps(data, indent=2) if args.json else text)
    return EXIT_OK


def cmd_print_config(cfg: PipelineConfig, args) -> int:
    sys.stdout.write(config_to_toml(cfg))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--dataset", help="dataset directory (overrides config)")
    common.add_argument("--output", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="mvcg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--scene", choices=["tabletop", "sphere", "plane"])
    s.add_argument("--views", type=int)
    s.set_defaults(func=cmd_synth)

    helps = {
        "vote": "multi-view depth consistency voting",
        "ba": "one confidence-weighted local bundle adjustment",
        "refine": "BA and supervision refinement loop",
        "fit-field": "fit the density/color grid",
        "fuse": "TSDF fusion of vote-filtered depth",
        "complete": "fill stereo holes from the fused volume",
        "eval": "metrics against ground truth",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text).set_defaults(func=cmd_stage)

    r = sub.add_parser("render", parents=[common], help="render one reduced-scale view of a fitted field")
    r.add_argument("--field", help="field file (default: <output>/field/initial.dgf)")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--out", help="output folder (default: <output>/render)")
    r.set_defaults(func=cmd_render)

    sm = sub.add_parser("sample", parents=[common], help="depth-guided ray samples as CSV")
    sm.add_argument("--d-hat", type=float, required=True)
    sm.add_argument("--sigma", type=float, required=True)
    sm.add_argument("--near", type=float, required=True)
    sm.add_argument("--far", type=float, required=True)
    sm.add_argument("--count", type=int, default=16)
    sm.add_argument("--out", help="CSV path (default: stdout)")
    sm.set_defaults(func=cmd_sample)

    pl = sub.add_parser("pipeline", parents=[common], help="run every enabled stage in order")
    pl.add_argument("--synth", action="store_true", help="write the dataset first")
    pl.add_argument("--json", action="store_true", help="print the machine-readable report")
    pl.set_defaults(func=cmd_pipeline)

    pc = sub.add_parser("print-config", parents=[common], help="dump the effective configuration as TOML")
    pc.set_defaults(func=cmd_print_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(cfg, args)
    except StageError as exc:
        logger.error("%s", exc)
        return EXIT_STAGE
    except (ConfigError, InvalidInputError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
