import math

import numpy as np
import torch

from splatsdf.diff_core import gradient_check, seed_everything
from splatsdf.rasterizer import render
from splatsdf.regularizers import (
    WARNINGS,
    loss_center,
    loss_render_consistency,
    loss_shape,
    normal_from_depth,
    sample_disk_point,
    zero_set_residual,
)
from splatsdf.splat_scene import SplatDisk, disk_point, kernel

from conftest import ParameterFunction, PlaneField, SphereField, disk_scene, facing_camera, gradcheck_field


def test_normal_from_depth_of_a_fronto_parallel_plane():
    camera = facing_camera(12, 10, 10.0)
    normals, valid = normal_from_depth(torch.full((10, 12), 2.0), camera)
    assert valid[1:-1, 1:-1].all() and not valid[0].any() and not valid[:, -1].any()
    assert torch.allclose(normals[valid], torch.tensor([0.0, 0.0, -1.0]).expand(int(valid.sum()), 3))


def test_normal_from_depth_masks_low_alpha():
    camera = facing_camera(8, 8)
    alpha = torch.ones(8, 8)
    alpha[4, 4] = 0.1
    _, valid = normal_from_depth(torch.full((8, 8), 2.0), camera, alpha, alpha_threshold=0.5)
    assert not valid[4, 4] and not valid[3, 4] and not valid[4, 5]
    assert valid[1, 1]


def test_render_consistency_is_zero_for_a_flat_disk():
    scene = disk_scene([[0.0, 0.0, 2.0]], scales=2.0, opacities=0.99)
    camera = facing_camera(8, 8)
    out = render(scene, camera)
    assert float(loss_render_consistency(out, camera)) < 1e-10


def test_render_consistency_without_valid_pixels_warns():
    before = WARNINGS["render_consistency"]
    out = render(disk_scene(np.zeros((0, 3))), facing_camera())
    assert float(loss_render_consistency(out, facing_camera())) == 0.0
    assert WARNINGS["render_consistency"] == before + 1


def test_sample_disk_point_is_clamped():
    scene = disk_scene(np.zeros((200, 3)))
    u, v, p = sample_disk_point(scene.disks(), seed_everything(0), clamp=1.0)
    assert float(u.abs().max()) <= 1.0 and float(v.abs().max()) <= 1.0
    assert torch.allclose(p[:, 2], torch.zeros(200))


def test_shape_loss_partials():
    # f(x) = z - c; disk 0 sits 0.3 above the zero plane, disk 1 is sky, disk 2 is unseen
    field = PlaneField(offset=0.1)
    scene = disk_scene([[0.0, 0.0, 0.4], [0.0, 0.0, 5.0], [1.0, 0.0, 0.7]], scales=0.2, is_sky=[False, True, False])
    weights = torch.tensor([0.5, 0.9, 0.0])
    loss = loss_shape(scene, field, weights, uv=(0.5, -1.0))

    response = math.exp(-(0.25 + 1.0) / 2.0)
    assert math.isclose(float(loss), 0.5 * 0.5 * response * 0.3 ** 2, rel_tol=1e-12)
    loss.backward()
    assert torch.allclose(scene.means.grad[0], torch.tensor([0.0, 0.0, 0.5 * response * 0.3]))
    assert torch.equal(scene.means.grad[1:], torch.zeros(2, 3))
    assert math.isclose(float(field.offset.grad), -0.5 * response * 0.3, rel_tol=1e-12)


def test_shape_loss_can_leave_the_field_alone():
    field = PlaneField(offset=0.1)
    scene = disk_scene([[0.0, 0.0, 0.4]], scales=0.2)
    loss_shape(scene, field, torch.ones(1), uv=(0.0, 0.0), to_field=False).backward()
    assert field.offset.grad is None
    assert float(scene.means.grad[0, 2]) > 0.0


def test_shape_loss_reaches_rotation_and_scale():
    field = PlaneField()
    quat = torch.tensor([[math.cos(0.2), math.sin(0.2), 0.0, 0.0]])
    scene = disk_scene([[0.0, 0.0, 0.0]], quats=quat.numpy(), scales=0.3)
    loss_shape(scene, field, torch.ones(1), uv=(0.0, 1.0)).backward()
    assert float(scene.quats.grad.abs().sum()) > 0.0
    assert float(scene.log_scales.grad[0, 1].abs()) > 0.0


def test_center_loss_ignores_rotation_and_scale():
    field = PlaneField()
    quat = torch.tensor([[math.cos(0.2), math.sin(0.2), 0.0, 0.0]])
    scene = disk_scene([[0.0, 0.0, 0.25]], quats=quat.numpy(), scales=0.3)
    loss = loss_center(scene, field, torch.tensor([2.0]))
    assert math.isclose(float(loss), 0.5 * 2.0 * 0.25 ** 2, rel_tol=1e-12)
    loss.backward()
    assert scene.quats.grad is None and scene.log_scales.grad is None
    assert torch.allclose(scene.means.grad[0], torch.tensor([0.0, 0.0, 0.5]))


def test_zero_set_residual():
    field = PlaneField(offset=0.0)
    scene = disk_scene([[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 7.0]], is_sky=[False, False, True])
    assert zero_set_residual(scene, field, seed_everything(0)) < 1e-12
    lifted = disk_scene([[0.0, 0.0, 0.5]])
    assert math.isclose(zero_set_residual(lifted, field, seed_everything(0)), 0.5, rel_tol=1e-12)


def layered_disks():
    """Three slightly tilted wide disks at separate depths covering an 8x8 view."""
    quats = [[1.0, 0.08, -0.05, 0.0], [1.0, -0.06, 0.1, 0.3], [1.0, 0.0, 0.07, -0.2]]
    return disk_scene(
        [[0.05, -0.03, 2.0], [-0.1, 0.08, 2.5], [0.02, 0.0, 3.0]],
        quats=np.array(quats), scales=1.5, opacities=[0.9, 0.85, 0.8],
    ).disks()


def test_render_consistency_gradients_match_finite_differences():
    disks = layered_disks()
    camera = facing_camera(8, 8)

    def consistency(means, quats, scales, opacities):
        splat = SplatDisk(means, quats, scales, opacities, disks.sh.detach(), disks.is_sky)
        return loss_render_consistency(render(splat, camera), camera)

    inputs = [t.detach().clone().requires_grad_(True) for t in (disks.means, disks.quats, disks.scales, disks.opacities)]
    assert float(consistency(*inputs)) > 1e-6
    assert gradient_check(consistency, inputs, eps=1e-6, atol=1e-7, rtol=1e-3)


def test_shape_loss_gradients_match_finite_differences():
    field = gradcheck_field(3)
    rng = np.random.default_rng(2)
    quats = np.column_stack([np.ones(4), rng.normal(0.0, 0.4, (4, 3))])
    disks = disk_scene(rng.uniform(-0.5, 0.5, (4, 3)), quats=quats, scales=0.2).disks()
    weights = torch.tensor([0.5, 1.2, 0.8, 0.3])
    uv = (torch.tensor([0.3, -0.8, 1.1, 0.0]), torch.tensor([-0.4, 0.2, 0.6, -1.3]))

    def shape(f, means, quats, scales):
        splat = SplatDisk(means, quats, scales, disks.opacities.detach(), disks.sh.detach(), disks.is_sky)
        return loss_shape(splat, f, weights, uv=uv)

    loss = ParameterFunction(field, shape)
    structure = [t.detach().clone().requires_grad_(True) for t in (disks.means, disks.quats, disks.scales)]
    count = len(structure)

    def combined(*values):
        return loss.at(values[count:], *values[:count])

    assert gradient_check(combined, structure + loss.initial(), eps=1e-6, atol=1e-7, rtol=1e-4)


def test_shape_loss_pulls_the_sample_along_the_field_gradient():
    field = SphereField(radius=1.0)
    rng = np.random.default_rng(9)
    quats = np.column_stack([np.ones(3), rng.normal(0.0, 0.5, (3, 3))])
    scene = disk_scene([[0.0, 0.0, 1.1], [0.8, 0.0, 0.0], [0.0, -0.5, 0.5]], quats=quats, scales=0.3)
    weights = torch.tensor([1.0, 0.4, 2.0])
    u, v = torch.tensor([0.5, -0.2, 1.0]), torch.tensor([0.1, 0.7, -0.6])
    loss_shape(scene, field, weights, uv=(u, v)).backward()

    with torch.no_grad():
        points = disk_point(scene.disks(), u, v)
        values = field.evaluate(points.numpy())
        normals, _ = field.gradient(points)
    expected = (weights * kernel(u, v) * torch.as_tensor(values)).unsqueeze(-1) * normals
    assert torch.allclose(scene.means.grad, expected, rtol=1e-10, atol=1e-12)
    assert torch.allclose(scene.means.grad.norm(dim=-1), (weights * kernel(u, v) * torch.as_tensor(values)).abs())
