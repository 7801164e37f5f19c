import os

from splatsdf import evalkit
from splatsdf.command import Command
from splatsdf.errors import CheckpointError, ConfigError, DatasetError
from splatsdf.geometry_init import TriangleMesh
from splatsdf.trainer import load_training_state
from splatsdf.utils.dataset import Dataset


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Score a mesh against a reference mesh and trained splats against held-out views.")
    Eval.configure_parsers(parser)
    return parser


class Eval(Command):
    """Metrics against ground truth."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        threshold = args.threshold if args.threshold is not None else cfg.fscore_threshold
        dataset = Dataset.load(args.data, cfg.holdout_every) if args.data else None
        metrics = {}

        if args.mesh:
            gt_path = args.gt_mesh or (os.path.join(args.data, "gt", "gt_mesh.ply") if args.data else None)
            if gt_path is None or not os.path.isfile(gt_path):
                raise DatasetError(f"Reference mesh {gt_path} not found (use --gt-mesh or --data)")
            metrics.update(evalkit.evaluate_mesh(
                TriangleMesh.load(args.mesh), TriangleMesh.load(gt_path), threshold, cfg.eval_points, seed=cfg.seed,
            ))
        if args.checkpoint:
            if dataset is None:
                raise ConfigError("Render evaluation needs --data for the held-out views")
            scene = load_training_state(args.checkpoint)["scene"]
            if scene is None:
                raise CheckpointError(f"{args.checkpoint} holds no splats section")
            _, test_views = dataset.split()
            views = test_views or dataset.cameras
            metrics.update(evalkit.evaluate_renders(scene, views, crop=cfg.eval_crop, out_dir=os.path.join(args.out, "renders")))
        if not metrics:
            raise ConfigError("Nothing to evaluate: give --mesh and/or --checkpoint")
        evalkit.write_report(args.out, metrics)
        print(evalkit.format_summary(metrics), end="")
        return metrics

    @classmethod
    def get_description(cls):
        return "Mesh (C-L1, F-score) and render (PSNR, SSIM) metrics"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        cls.add_data_argument(parser, required=False)
        parser.add_argument("--mesh", metavar="PLY", help="predicted mesh [str]")
        parser.add_argument("--gt-mesh", metavar="PLY", help="reference mesh, defaults to DATA/gt/gt_mesh.ply [str]")
        parser.add_argument("--checkpoint", metavar="CKPT", help="checkpoint with splats to render [str]")
        parser.add_argument("--threshold", type=float, help="F-score distance threshold, world units [float]")
