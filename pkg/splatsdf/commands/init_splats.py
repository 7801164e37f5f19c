import os

from splatsdf.command import Command
from splatsdf.diff_core import seed_everything
from splatsdf.trainer import init_stage, load_training_state
from splatsdf.errors import CheckpointError
from splatsdf.utils.dataset import Dataset


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Place splats on the zero level set of a trained field, add the sky and fit colors.")
    InitSplats.configure_parsers(parser)
    return parser


class InitSplats(Command):
    """Initialize splats from a trained signed distance field."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        dataset = Dataset.load(args.data, cfg.holdout_every)
        bounds = dataset.bounds(cfg.bounds_margin)
        generator = seed_everything(cfg.seed)
        sdf_path = args.sdf or os.path.join(args.out, "sdf.ckpt")
        field = load_training_state(sdf_path, generator)["field"]
        if field is None:
            raise CheckpointError(f"{sdf_path} holds no sdf_field section")
        _, scene = init_stage(field, dataset, cfg, args.out, generator, bounds, resume=False)
        scene.export_ply(os.path.join(args.out, "splats_init.ply"))
        return os.path.join(args.out, "init.ckpt")

    @classmethod
    def get_description(cls):
        return "Initialize splats from the field (writes init.ckpt)"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        cls.add_data_argument(parser)
        parser.add_argument("--sdf", metavar="CKPT", help="field checkpoint, defaults to OUT/sdf.ckpt [str]")
