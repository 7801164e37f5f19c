import os
import logging

from splatsdf import diff_core
from splatsdf.errors import ConfigError
from splatsdf.load_data import PRESETS
from splatsdf.trainer import TrainConfig
from splatsdf.utils.other import to_command_name

logger = logging.getLogger(__name__)


class Command:
    """Base class of every ``splatsdf`` subcommand.

    Subclasses implement ``configure_parsers`` to add their own options and ``process`` to
    run. The class name in CamelCase gives the subcommand name in kebab-case.
    """

    def __init__(self):
        self.logger = logging.getLogger(f"{__name__}.{self.get_name()}")

    def process(self, args):
        raise NotImplementedError(f"{self.get_name()} does not implement process")

    @classmethod
    def get_name(cls):
        return to_command_name(cls.__name__)

    @classmethod
    def get_description(cls):
        return (cls.__doc__ or "").strip().splitlines()[0] if cls.__doc__ else cls.get_name()

    @classmethod
    def get_default_parser(cls, desc=""):
        from argparse import ArgumentParser

        parser = ArgumentParser(description=desc)
        parser.add_argument("-v", "--verbose", action="store_true", default=False, help="Increase verbosity")
        parser.add_argument("--logfile", action="store_true", default=False, help="Also log to a dated file in LOG_DIRECTORY")
        return parser

    @classmethod
    def get_parsers(cls):
        """Returns the default parser for this command"""
        parser = cls.get_default_parser(cls.get_description())
        cls.configure_parsers(parser)
        return parser

    @classmethod
    def configure_parsers(cls, parser):
        parser.set_defaults(command=cls.get_name())
        cls.add_common_arguments(parser)

    @classmethod
    def add_common_arguments(cls, parser, out_required=True):
        parser.add_argument(
            "--config", metavar="CFG",
            help=f"run configuration file or preset name ({', '.join(PRESETS)}); defaults to built-in values",
        )
        parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one config key")
        parser.add_argument("--seed", type=int, help="random seed, overrides the config [int]")
        parser.add_argument("--out", metavar="DIR", required=out_required, help="output directory [str]")
        parser.add_argument(
            "--test-mode", action="store_true", default=False, help="64-bit deterministic numerics",
        )

    @classmethod
    def add_data_argument(cls, parser, required=True):
        parser.add_argument("--data", metavar="DIR", required=required, help="dataset directory [str]")

    def load_config(self, args):
        """Defaults, then the ``--config`` file or preset, then ``--set`` overrides and ``--seed``."""
        cfg = TrainConfig()
        if args.config:
            path = PRESETS.get(args.config, args.config)
            if not os.path.isfile(path):
                raise ConfigError(f"Config {args.config!r} is neither a file nor a preset ({', '.join(PRESETS)})")
            cfg = TrainConfig.from_file(path, base=cfg)
        if args.set:
            cfg = cfg.with_overrides(args.set)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        return cfg

    def setup(self, args):
        """Numeric mode and output directory shared by every subcommand."""
        diff_core.configure(test_mode=True if args.test_mode else None)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
