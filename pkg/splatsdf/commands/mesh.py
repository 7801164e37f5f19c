import os

from splatsdf.command import Command
from splatsdf.errors import CheckpointError
from splatsdf.trainer import export_mesh, load_training_state


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Extract the zero level set of a trained field with marching cubes.")
    Mesh.configure_parsers(parser)
    return parser


class Mesh(Command):
    """Marching-cubes mesh export."""

    def process(self, args):
        cfg = self.load_config(args)
        if args.cell is not None:
            cfg = cfg.replace(mc_cell=args.cell)
        self.setup(args)
        field = load_training_state(args.checkpoint)["field"]
        if field is None:
            raise CheckpointError(f"{args.checkpoint} holds no sdf_field section")
        path = os.path.join(args.out, "mesh.ply")
        export_mesh(field, cfg, path, progress=args.progress)
        return path

    @classmethod
    def get_description(cls):
        return "Export the field's zero level set as mesh.ply"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        parser.add_argument("--checkpoint", metavar="CKPT", required=True, help="checkpoint with an sdf_field section [str]")
        parser.add_argument("--cell", type=float, help="marching cubes cell size in world units [float]")
        parser.add_argument("--progress", action="store_true", default=False, help="show a progress bar")
