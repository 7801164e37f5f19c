import os

import numpy as np
import pytest
import torch
from torch.func import functional_call

from splatsdf import diff_core
from splatsdf.rasterizer import CameraFrame
from splatsdf.sdf_field import HashGridConfig, SdfField
from splatsdf.splat_scene import SplatScene
from splatsdf.synth_data import CameraSpec, LidarSpec, TrajectorySpec, generate_dataset, make_scene
from splatsdf.trainer import TrainConfig

TEST_DATA_DIR = os.path.join(os.path.dirname(__file__), "test_data")
TINY_CONFIG = os.path.join(TEST_DATA_DIR, "tiny.cfg")


@pytest.fixture(autouse=True)
def float64_mode():
    diff_core.configure(test_mode=True)
    yield


class SphereField(torch.nn.Module):
    """Exact signed distance to a sphere with a trainable radius and constant beta."""

    def __init__(self, radius=1.0, beta=0.1, half_extent=1.5):
        super().__init__()
        self.radius = torch.nn.Parameter(torch.tensor(float(radius)))
        self.beta = beta
        self.register_buffer("bounds_min", torch.full((3,), -half_extent))
        self.register_buffer("bounds_max", torch.full((3,), half_extent))

    @property
    def bounds(self):
        return self.bounds_min.numpy(), self.bounds_max.numpy()

    def forward(self, x):
        s = x.norm(dim=-1) - self.radius
        return s, torch.full_like(s, self.beta)

    def gradient(self, x):
        x = torch.as_tensor(x, dtype=self.bounds_min.dtype).detach().requires_grad_(True)
        with torch.enable_grad():
            s, _ = self(x)
            (grad,) = torch.autograd.grad(s.sum(), x)
        return grad, grad.norm(dim=-1) < 1e-8

    @torch.no_grad()
    def evaluate(self, points):
        return self(torch.as_tensor(points, dtype=self.bounds_min.dtype))[0].double().numpy()


class PlaneField(torch.nn.Module):
    """``f(x) = z - offset`` with a trainable offset."""

    def __init__(self, offset=0.0):
        super().__init__()
        self.offset = torch.nn.Parameter(torch.tensor(float(offset)))

    def forward(self, x):
        s = x[..., 2] - self.offset
        return s, torch.full_like(s, 0.1)


class ParameterFunction(torch.nn.Module):
    """``loss(module, *args)`` evaluated with the module parameters passed in explicitly.

    Lets ``gradient_check`` perturb the parameters of a field like any other input.
    """

    def __init__(self, module, loss):
        super().__init__()
        self.inner = module
        self.loss = loss
        self.names = [name for name, _ in module.named_parameters()]

    def forward(self, *args):
        return self.loss(self.inner, *args)

    def initial(self):
        return [p.detach().clone().requires_grad_(True) for p in self.inner.parameters()]

    def at(self, values, *args):
        return functional_call(self, {f"inner.{name}": value for name, value in zip(self.names, values)}, args)


def gradcheck_field(seed=0):
    """Hash-grid field with 410 parameters and O(1) spatial gradients."""
    generator = diff_core.seed_everything(seed)
    grid = HashGridConfig(levels=4, features_per_level=8, table_size_log2=2, base_resolution=2, growth_factor=2.0)
    field = SdfField(grid, hidden_width=8, hidden_layers=1)
    with torch.no_grad():
        for table in field.encoding.tables:
            table.normal_(0.0, 0.3, generator=generator)
        field.head.weight.normal_(0.0, 0.3, generator=generator)
    return field


def facing_camera(width=8, height=8, focal=8.0):
    """Camera at the origin looking down +z."""
    return CameraFrame(focal, focal, width / 2.0, height / 2.0, width, height, np.eye(4))


def disk_scene(means, quats=None, scales=0.5, opacities=0.99, sh_degree=2, is_sky=None):
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    count = len(means)
    if quats is None:
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    return SplatScene(
        means=means,
        quats=quats,
        scales=np.broadcast_to(np.asarray(scales, dtype=np.float64).reshape(-1, 1), (count, 2)).copy(),
        opacities=np.broadcast_to(np.asarray(opacities, dtype=np.float64), (count,)).copy(),
        sh=np.zeros((count, (sh_degree + 1) ** 2, 3)),
        is_sky=is_sky,
        sh_degree=sh_degree,
        scale_min=1e-4,
        scale_max=3.0,
    )


@pytest.fixture
def sphere_field():
    return SphereField()


@pytest.fixture
def tiny_config():
    return TrainConfig.from_file(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Six 32x24 views and three sparse LiDAR sweeps around the unit sphere."""
    diff_core.configure(test_mode=True)
    out_dir = str(tmp_path_factory.mktemp("sphere_dataset"))
    generate_dataset(
        make_scene("sphere"),
        out_dir,
        TrajectorySpec("orbit", 6, radius=3.0, height=1.2),
        CameraSpec(width=32, height=24, fov_deg=60.0),
        LidarSpec(beams=8, azimuth_steps=48, max_range=10.0, every=2),
        seed=0,
        gt_mesh_cell=0.107,
    )
    return out_dir
