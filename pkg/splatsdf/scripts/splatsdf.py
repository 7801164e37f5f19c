#!/usr/bin/env python
import sys
import time
import logging

from decouple import config

from splatsdf.command import Command
from splatsdf.errors import ConfigError, SplatSdfError, StageError
from splatsdf.utils.other import setup_logging

from splatsdf.commands.gen import Gen
from splatsdf.commands.train_sdf import TrainSdf
from splatsdf.commands.init_splats import InitSplats
from splatsdf.commands.train import Train
from splatsdf.commands.render import Render
from splatsdf.commands.mesh import Mesh
from splatsdf.commands.eval import Eval
from splatsdf.commands.ablate import Ablate
from splatsdf.commands.pipeline import Pipeline

LOG_DIRECTORY = config("LOG_DIRECTORY", default="logs/")
LOG_FILE = f"{time.strftime('%Y-%m-%d')}{config('LOG_FILENAME', default='_splatsdf.log')}"

COMMANDS = [
    Gen,
    TrainSdf,
    InitSplats,
    Train,
    Render,
    Mesh,
    Eval,
    Ablate,
    Pipeline,
]


def build_parser():
    parser = Command.get_default_parser("LiDAR-initialized Gaussian splats jointly trained with a neural SDF")
    subparsers = parser.add_subparsers(dest="command", help="Pipeline stages and tools")
    subparsers.required = True

    for c in COMMANDS:
        p = subparsers.add_parser(c.get_name(), help=c.get_description())
        c.configure_parsers(p)
    return parser


def main(argv=None):
    """Run one subcommand.

    Returns 0 on success, 1 when a stage fails and 2 for invalid configuration.
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    logger = setup_logging(
        logfile=args.logfile,
        filedir=LOG_DIRECTORY,
        filename=LOG_FILE,
        level=logging.DEBUG if args.verbose else logging.INFO,
    )

    command = next(c for c in COMMANDS if c.get_name() == args.command)
    try:
        command().process(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except StageError as e:
        logger.error(f"{e.stage} failed: {e.message}")
        return 1
    except SplatSdfError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
