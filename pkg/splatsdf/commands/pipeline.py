from splatsdf.command import Command
from splatsdf.trainer import run_pipeline


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Run SDF training, initialization, joint training, meshing and evaluation.")
    Pipeline.configure_parsers(parser)
    return parser


class Pipeline(Command):
    """All stages end to end."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        return run_pipeline(args.data, cfg, args.out, resume=not args.no_resume, progress=args.progress)

    @classmethod
    def get_description(cls):
        return "Run every stage and write all artifacts"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        cls.add_data_argument(parser)
        parser.add_argument("--no-resume", action="store_true", default=False, help="ignore existing stage checkpoints")
        parser.add_argument("--progress", action="store_true", default=False, help="show progress bars")
