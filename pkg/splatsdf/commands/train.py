import os

from splatsdf.command import Command
from splatsdf.diff_core import seed_everything
from splatsdf.errors import CheckpointError
from splatsdf.trainer import joint_stage, load_training_state
from splatsdf.utils.dataset import Dataset


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Jointly optimize the splats and the field under photometric and geometric losses.")
    Train.configure_parsers(parser)
    return parser


class Train(Command):
    """Joint training of splats and field."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        dataset = Dataset.load(args.data, cfg.holdout_every)
        generator = seed_everything(cfg.seed)
        if args.resume:
            field = scene = None
        else:
            init_path = args.init or os.path.join(args.out, "init.ckpt")
            state = load_training_state(init_path, generator)
            field, scene = state["field"], state["scene"]
            if field is None or scene is None:
                raise CheckpointError(f"{init_path} needs both sdf_field and splats sections")
        joint_stage(field, scene, dataset, cfg, args.out, generator, resume_path=args.resume, progress=args.progress)
        return os.path.join(args.out, "joint.ckpt")

    @classmethod
    def get_description(cls):
        return "Joint splat and field training (writes joint.ckpt)"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        cls.add_data_argument(parser)
        parser.add_argument("--init", metavar="CKPT", help="initialization checkpoint, defaults to OUT/init.ckpt [str]")
        parser.add_argument("--resume", metavar="CKPT", help="continue from a joint checkpoint [str]")
        parser.add_argument("--progress", action="store_true", default=False, help="show a progress bar")
