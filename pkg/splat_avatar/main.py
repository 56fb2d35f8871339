#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Main entry point for the Splat Avatar pipeline.

This script provides a command-line interface to:
- Generate the synthetic rigged capsule dataset (synth)
- Fit an avatar to a dataset manifest (train)
- Render a checkpoint for one pose or a pose sequence (render, animate)
- Export the rigged colored mesh (export)
- Evaluate a checkpoint or a mesh pair (eval)

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.
"""

import argparse
import logging
import sys
from datetime import date

from splat_avatar.config import LOG_DIR, __version__, load_config
from splat_avatar.scripts.run_pipeline import (
    run_animate,
    run_eval,
    run_export,
    run_render,
    run_synth,
    run_train,
)
from splat_avatar.scripts.utils import (
    DataError,
    DivergenceError,
    SplatAvatarError,
    UsageError,
    configure_runtime,
    ensure_directory_exists,
)

logger = logging.getLogger("splat_avatar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class PipelineArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that exits with EXIT_USAGE instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(level="INFO"):
    """Log to stdout and to a dated file under LOG_DIR."""
    ensure_directory_exists(LOG_DIR)
    log_file = LOG_DIR / f"pipeline_{date.today().strftime('%Y-%m-%d')}.log"
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


def setup_argparser():
    """Set up command line arguments."""
    parser = PipelineArgumentParser(
        prog="splat_avatar",
        description="Splat Avatar: mesh-bound Gaussian splat avatars from posed multi-view images",
        epilog="Example: python -m splat_avatar.main synth --out data/capsule",
    )
    parser.add_argument("--seed", type=int, default=0, help="Seed for every random choice (default: 0)")
    parser.add_argument("--threads", type=int, default=None, help="Number of compute threads")
    parser.add_argument("--config", default=None, help="key = value configuration file")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--version", action="version", version=f"Splat Avatar v{__version__}")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=PipelineArgumentParser)

    synth = sub.add_parser("synth", help="Generate the synthetic capsule dataset")
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--views", type=int, help="Number of training views")
    synth.add_argument("--resolution", type=int, help="Image width and height in pixels")

    train = sub.add_parser("train", help="Fit an avatar to a dataset manifest")
    train.add_argument("--manifest", required=True, help="Dataset manifest JSON")
    train.add_argument("--out", required=True, help="Output directory for checkpoints and losses.csv")
    train.add_argument("--epochs", type=int, help="Number of epochs")
    train.add_argument("--no-normal-loss", action="store_true", help="Train without the normal-map loss")

    render = sub.add_parser("render", help="Render color and normal images of a checkpoint")
    render.add_argument("--checkpoint", required=True)
    render.add_argument("--camera", required=True, help="Camera JSON")
    render.add_argument("--pose", required=True, help="Pose JSON")
    render.add_argument("--out", required=True, help="Output directory")

    animate = sub.add_parser("animate", help="Render a checkpoint over a pose sequence")
    animate.add_argument("--checkpoint", required=True)
    animate.add_argument("--camera", required=True, help="Camera JSON")
    animate.add_argument("--poses", required=True, help="Pose sequence JSON")
    animate.add_argument("--out", required=True, help="Output directory")

    export = sub.add_parser("export", help="Export the rigged colored mesh of a checkpoint")
    export.add_argument("--checkpoint", required=True)
    export.add_argument("--out", required=True, help="Destination .json or .obj")

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint or a mesh pair")
    evaluate.add_argument("--checkpoint", help="Checkpoint to evaluate")
    evaluate.add_argument("--manifest", help="Dataset manifest with held-out frames")
    evaluate.add_argument("--meshes", nargs=2, metavar=("MESH_A", "MESH_B"), help="Compare two meshes instead")
    evaluate.add_argument("--out", required=True, help="Metrics report JSON")

    return parser


def build_config(args):
    """Defaults < --config file < subcommand flags."""
    overrides = {}
    if args.command == "synth":
        overrides = {"synth_views": args.views, "synth_resolution": args.resolution}
    elif args.command == "train":
        overrides = {"epochs": args.epochs}
        if args.no_normal_loss:
            overrides["w_normal"] = 0.0
    return load_config(args.config, overrides)


def dispatch(args, config):
    if args.command == "synth":
        run_synth(args.out, config, args.seed)
    elif args.command == "train":
        run_train(args.manifest, args.out, config, args.seed)
    elif args.command == "render":
        run_render(args.checkpoint, args.camera, args.pose, args.out)
    elif args.command == "animate":
        run_animate(args.checkpoint, args.camera, args.poses, args.out)
    elif args.command == "export":
        run_export(args.checkpoint, args.out)
    elif args.command == "eval":
        if args.meshes is None and (args.checkpoint is None or args.manifest is None):
            raise UsageError("eval needs --checkpoint and --manifest, or --meshes")
        run_eval(args.out, args.checkpoint, args.manifest, args.meshes, config, args.seed)


def main(argv=None):
    """Main function to run the Splat Avatar pipeline."""
    parser = setup_argparser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    logger.info(f"Starting Splat Avatar v{__version__}: {args.command}")
    try:
        config = build_config(args)
        configure_runtime(args.seed, args.threads)
        dispatch(args, config)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except DivergenceError as e:
        logger.error(f"Training diverged in group '{e.group}': {e}")
        return EXIT_DIVERGED
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except SplatAvatarError as e:
        logger.error(f"Error: {e}")
        return EXIT_DATA

    logger.info(f"{args.command} completed")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
