import dataclasses

from splatsdf.command import Command
from splatsdf.load_data import SCENE_CHOICES
from splatsdf.synth_data import default_specs, generate_dataset, make_scene


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Render and scan a built-in analytic scene into a dataset directory.")
    Gen.configure_parsers(parser)
    return parser


class Gen(Command):
    """Generate a synthetic dataset from an analytic scene."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        scene = make_scene(args.scene)
        trajectory, camera_spec, lidar_spec = default_specs(args.scene)
        if args.frames is not None:
            trajectory = dataclasses.replace(trajectory, frames=args.frames)
        if args.width is not None or args.height is not None:
            camera_spec = dataclasses.replace(
                camera_spec,
                width=args.width or camera_spec.width,
                height=args.height or camera_spec.height,
            )
        lidar_spec = dataclasses.replace(lidar_spec, noise_sigma=args.noise, dropout=args.dropout)
        return generate_dataset(
            scene, args.out, trajectory, camera_spec, lidar_spec, seed=cfg.seed, extrapolation=args.extrapolation,
        )

    @classmethod
    def get_description(cls):
        return "Generate a synthetic dataset (images, LiDAR scans, ground truth)"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        parser.add_argument("--scene", choices=SCENE_CHOICES, required=True, help="analytic scene to generate")
        parser.add_argument("--frames", type=int, help="number of camera frames [int]")
        parser.add_argument("--width", type=int, help="image width in pixels [int]")
        parser.add_argument("--height", type=int, help="image height in pixels [int]")
        parser.add_argument("--noise", type=float, default=0.0, help="Gaussian LiDAR range noise sigma [float]")
        parser.add_argument("--dropout", type=float, default=0.0, help="fraction of LiDAR returns dropped [float]")
        parser.add_argument(
            "--extrapolation", type=int, default=0, metavar="N",
            help="also write N free-space extrapolation poses [int]",
        )
