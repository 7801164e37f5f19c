import os

import numpy as np
import torch

from splatsdf import evalkit
from splatsdf.command import Command
from splatsdf.errors import CheckpointError, ConfigError
from splatsdf.rasterizer import render
from splatsdf.trainer import load_training_state
from splatsdf.utils import imageio
from splatsdf.utils.dataset import load_cameras


def get_parsers():
    """Returns the default parser for this command"""
    parser = Command.get_default_parser("Render color, depth and normal images of trained splats from a pose file.")
    Render.configure_parsers(parser)
    return parser


class Render(Command):
    """Render novel views of trained splats."""

    def process(self, args):
        if not args.data and not (args.poses and args.intrinsics):
            raise ConfigError("render needs --data or both --poses and --intrinsics")
        self.setup(args)
        scene = load_training_state(args.checkpoint)["scene"]
        if scene is None:
            raise CheckpointError(f"{args.checkpoint} holds no splats section")
        intrinsics = args.intrinsics or os.path.join(args.data, "intrinsics.txt")
        poses = args.poses or os.path.join(args.data, "poses.txt")
        cameras = load_cameras(poses, intrinsics)
        with torch.no_grad():
            outputs = [render(scene, camera) for camera in cameras]
        depth_scale = imageio.depth_scale_for(np.stack([out.depth.double().numpy() for out in outputs]))
        with open(os.path.join(args.out, "depth_scale.txt"), "w") as f:
            f.write(f"{depth_scale:.17g}\n")
        for camera, out in zip(cameras, outputs):
            evalkit.save_render(out, args.out, camera.frame_id, depth_scale)
        self.logger.info(f"Rendered {len(cameras)} views into {args.out}")
        return args.out

    @classmethod
    def get_description(cls):
        return "Render novel views from a pose file"

    @classmethod
    def configure_parsers(cls, parser):
        super().configure_parsers(parser)
        parser.add_argument("--checkpoint", metavar="CKPT", required=True, help="checkpoint with a splats section [str]")
        cls.add_data_argument(parser, required=False)
        parser.add_argument("--poses", metavar="FILE", help="poses.txt-format file, defaults to DATA/poses.txt [str]")
        parser.add_argument("--intrinsics", metavar="FILE", help="intrinsics.txt, defaults to DATA/intrinsics.txt [str]")
