import os
import shutil

from splatsdf import evalkit
from splatsdf.command import Command
from splatsdf.load_data import REGULARIZER_CHOICES
from splatsdf.trainer import run_pipeline

ABLATION_COLUMNS = ("psnr", "ssim", "chamfer_l1", "f_score", "zero_set_residual")


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Run the pipeline once per regularizer variant and compare the results.")
    Ablate.configure_parsers(parser)
    return parser


class Ablate(Command):
    """Regularizer ablation: render, render+center, render+shape."""

    def process(self, args):
        cfg = self.load_config(args)
        self.setup(args)
        results = {}
        shared = None
        for variant in args.variants:
            out_dir = os.path.join(args.out, variant.replace("+", "_"))
            os.makedirs(out_dir, exist_ok=True)
            if shared is not None:
                # The field and initialization do not depend on the regularizer
                for name in ("sdf.ckpt", "init.ckpt"):
                    if os.path.isfile(os.path.join(shared, name)):
                        shutil.copyfile(os.path.join(shared, name), os.path.join(out_dir, name))
            self.logger.info(f"Ablation variant {variant} -> {out_dir}")
            run_pipeline(args.data, cfg.replace(regularizer=variant), out_dir, resume=True, progress=args.progress)
            results[variant] = evalkit.read_report(out_dir)
            shared = shared or out_dir
        evalkit.write_comparison(os.path.join(args.out, "ablation.csv"), results, ABLATION_COLUMNS)
        table = evalkit.comparison_table(results, ABLATION_COLUMNS)
        with open(os.path.join(args.out, "ablation.txt"), "w") as f:
            f.write(table)
        print(table, end="")
        return results

    @classmethod
    def get_description(cls):
        return "Compare regularizer variants (writes ablation.csv)"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        cls.add_data_argument(parser)
        parser.add_argument(
            "--variants", nargs="+", choices=REGULARIZER_CHOICES, default=list(REGULARIZER_CHOICES),
            help="regularizer variants to run",
        )
        parser.add_argument("--progress", action="store_true", default=False, help="show progress bars")
