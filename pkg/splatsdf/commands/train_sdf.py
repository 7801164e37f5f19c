import os

from splatsdf.command import Command
from splatsdf.diff_core import seed_everything
from splatsdf.trainer import export_mesh, sdf_stage
from splatsdf.utils.dataset import Dataset


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Fit the neural signed distance field to the LiDAR scans of a dataset.")
    TrainSdf.configure_parsers(parser)
    return parser


class TrainSdf(Command):
    """Train the signed distance field from LiDAR rays."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        dataset = Dataset.load(args.data, cfg.holdout_every)
        bounds = dataset.bounds(cfg.bounds_margin)
        generator = seed_everything(cfg.seed)
        field = sdf_stage(dataset, cfg, args.out, generator, bounds, resume=False, progress=args.progress)
        if args.mesh:
            export_mesh(field, cfg, os.path.join(args.out, "sdf_mesh.ply"), bounds, progress=args.progress)
        return os.path.join(args.out, "sdf.ckpt")

    @classmethod
    def get_description(cls):
        return "Train the signed distance field (writes sdf.ckpt)"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        cls.add_data_argument(parser)
        parser.add_argument("--mesh", action="store_true", default=False, help="also export sdf_mesh.ply")
        parser.add_argument("--progress", action="store_true", default=False, help="show a progress bar")
