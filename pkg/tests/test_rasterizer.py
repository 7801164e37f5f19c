import math

import numpy as np
import pytest
import torch

from splatsdf.diff_core import gradient_check, seed_everything
from splatsdf.errors import NonFiniteError
from splatsdf.rasterizer import (
    CameraFrame,
    intersect,
    loss_color,
    render,
    render_backward,
    render_reference,
    ssim_torch,
    view_space_gradient,
)
from splatsdf.splat_scene import SplatDisk, rgb_to_sh_dc

from conftest import disk_scene, facing_camera


def cluttered_scene():
    """Overlapping tilted disks in front of a camera at the origin."""
    rng = np.random.default_rng(4)
    means = np.column_stack([rng.uniform(-0.6, 0.6, 6), rng.uniform(-0.5, 0.5, 6), rng.uniform(1.5, 3.0, 6)])
    quats = np.column_stack([np.ones(6), rng.normal(0.0, 0.3, (6, 3))])
    scene = disk_scene(means, quats=quats, scales=rng.uniform(0.2, 0.5, 6), opacities=rng.uniform(0.3, 0.9, 6))
    with torch.no_grad():
        scene.sh[:, 0] = rgb_to_sh_dc(torch.as_tensor(rng.uniform(0.0, 1.0, (6, 3))))
        scene.sh[:, 1:4] = torch.as_tensor(rng.normal(0.0, 0.1, (6, 3, 3)))
    return scene


def random_scene(rng, count, opacity_range=(0.05, 0.99)):
    """``count`` random disks in front of a camera at the origin, colors kept inside (0, 1)."""
    means = np.column_stack([rng.uniform(-0.8, 0.8, count), rng.uniform(-0.8, 0.8, count), rng.uniform(1.5, 3.5, count)])
    quats = np.column_stack([np.ones(count), rng.normal(0.0, 0.4, (count, 3))])
    scene = disk_scene(
        means, quats=quats, scales=rng.uniform(0.15, 0.45, count), opacities=rng.uniform(*opacity_range, count),
    )
    with torch.no_grad():
        scene.sh[:, 0] = rgb_to_sh_dc(torch.as_tensor(rng.uniform(0.2, 0.8, (count, 3))))
        scene.sh[:, 1:] = torch.as_tensor(rng.normal(0.0, 0.05, (count, 8, 3)))
    return scene


def test_camera_validation():
    tests = [
        dict(fx=0.0),
        dict(width=0),
        dict(pose=np.eye(3)),
        dict(pose=np.diag([1.0, 1.0, -1.0, 1.0])),
    ]
    for override in tests:
        kwargs = dict(fx=8.0, fy=8.0, cx=4.0, cy=4.0, width=8, height=8, pose=np.eye(4))
        kwargs.update(override)
        with pytest.raises(ValueError):
            CameraFrame(**kwargs)


def test_project_pixel_centers():
    camera = facing_camera()
    _, dirs, view_cos = camera.rays()
    pixels, z = camera.project(dirs[2, 5][None] * 3.0)
    assert np.allclose(pixels, [[5.5, 2.5]])
    assert np.isclose(z[0], 3.0 * view_cos[2, 5])


def test_intersect_single_disk():
    disks = disk_scene([[0.0, 0.0, 2.0]], scales=0.5).disks()
    direction = np.array([0.1, 0.0, 1.0]) / math.sqrt(1.01)
    hits = intersect(disks, np.zeros(3), direction, view_axis=[0.0, 0.0, 1.0])
    assert bool(hits.hit[0])
    assert torch.isclose(hits.depth[0], torch.tensor(2.0))
    assert torch.isclose(hits.u[0], torch.tensor(0.4))
    assert torch.isclose(hits.v[0], torch.tensor(0.0))

    parallel = intersect(disks, np.zeros(3), np.array([1.0, 0.0, 0.0]))
    assert not bool(parallel.hit[0])
    behind = intersect(disks, np.zeros(3), np.array([0.0, 0.0, -1.0]))
    assert not bool(behind.hit[0])


def test_single_facing_disk():
    scene = disk_scene([[0.0, 0.0, 2.0]], scales=0.5, opacities=0.99)
    out = render(scene, facing_camera())
    # pixel (3, 3) sees the disk at (u, v) = (-0.25, -0.25)
    alpha = 0.99 * math.exp(-0.0625)
    assert math.isclose(float(out.alpha[3, 3]), alpha, rel_tol=1e-9)
    assert math.isclose(float(out.depth[3, 3]), 2.0, rel_tol=1e-9)
    assert torch.allclose(out.color[3, 3], torch.full((3,), 0.5 * alpha))
    assert torch.allclose(out.normal[3, 3], torch.tensor([0.0, 0.0, -alpha]))
    assert out.color.shape == (8, 8, 3) and out.depth.shape == (8, 8)


def test_tiled_render_matches_reference():
    scene = cluttered_scene()
    camera = CameraFrame(14.0, 14.0, 9.0, 6.5, 20, 13, np.eye(4))
    fast = render(scene, camera, tile_size=8)
    slow = render_reference(scene, camera)
    for name in ("color", "depth", "normal", "alpha", "splat_weights"):
        assert torch.allclose(getattr(fast, name), getattr(slow, name), atol=1e-10), name


def test_splat_weights_sum_to_alpha():
    scene = cluttered_scene()
    out = render(scene, CameraFrame(14.0, 14.0, 9.0, 6.5, 20, 13, np.eye(4)))
    assert torch.allclose(out.splat_weights.sum(), out.alpha.sum())
    assert torch.all(out.alpha <= 1.0)


def test_random_scenes_conserve_weight_and_match_reference():
    rng = np.random.default_rng(100)
    camera = CameraFrame(6.0, 6.0, 4.0, 3.0, 8, 6, np.eye(4))
    for trial in range(100):
        scene = random_scene(rng, int(rng.integers(1, 16)))
        fast = render(scene, camera, tile_size=4)
        slow = render_reference(scene, camera)
        assert float(fast.alpha.min()) >= 0.0 and float(fast.alpha.max()) <= 1.0 + 1e-12, trial
        assert torch.allclose(fast.splat_weights.sum(), fast.alpha.sum(), rtol=0.0, atol=1e-10), trial
        for name in ("color", "depth", "normal", "alpha", "splat_weights"):
            assert torch.allclose(getattr(fast, name), getattr(slow, name), rtol=0.0, atol=1e-6), (trial, name)


def test_render_ignores_splat_order():
    rng = np.random.default_rng(12)
    disks = random_scene(rng, 12).disks()
    permutation = torch.as_tensor(rng.permutation(12))
    shuffled = SplatDisk(
        disks.means[permutation], disks.quats[permutation], disks.scales[permutation],
        disks.opacities[permutation], disks.sh[permutation], disks.is_sky[permutation],
    )
    camera = facing_camera(10, 8)
    with torch.no_grad():
        out, out_shuffled = render(disks, camera), render(shuffled, camera)
    for name in ("color", "depth", "normal", "alpha"):
        assert torch.allclose(getattr(out, name), getattr(out_shuffled, name), rtol=0.0, atol=1e-12), name
    assert torch.allclose(out.splat_weights[permutation], out_shuffled.splat_weights, rtol=0.0, atol=1e-12)


def test_opaque_front_disk_hides_the_one_behind():
    red, green = rgb_to_sh_dc(torch.tensor([1.0, 0.0, 0.0])), rgb_to_sh_dc(torch.tensor([0.0, 1.0, 0.0]))
    sh = torch.zeros(2, 9, 3)
    sh[0, 0], sh[1, 0] = red, green
    disks = SplatDisk(
        means=torch.tensor([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]]),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]),
        scales=torch.full((2, 2), 0.5),
        opacities=torch.ones(2),
        sh=sh,
        is_sky=torch.zeros(2, dtype=torch.bool),
    )
    # one pixel whose ray passes through both disk centers
    camera = CameraFrame(1.0, 1.0, 0.5, 0.5, 1, 1, np.eye(4))
    out = render(disks, camera)
    assert torch.equal(out.splat_weights, torch.tensor([1.0, 0.0]))
    assert float(out.alpha[0, 0]) == 1.0
    assert math.isclose(float(out.depth[0, 0]), 2.0, rel_tol=1e-12)
    assert torch.allclose(out.color[0, 0], torch.tensor([1.0, 0.0, 0.0]))


def test_empty_scene_renders_background():
    scene = disk_scene(np.zeros((0, 3)))
    out = render(scene, facing_camera(), background=[0.1, 0.2, 0.3])
    assert torch.allclose(out.color, torch.tensor([0.1, 0.2, 0.3]).expand(8, 8, 3))
    assert torch.equal(out.alpha, torch.zeros(8, 8))


def test_render_gradients_match_finite_differences():
    scene = random_scene(np.random.default_rng(21), 20, opacity_range=(0.2, 0.7))
    disks = scene.disks()
    camera = facing_camera(8, 8)

    def rendered(means, quats, log_scales, opacities, sh):
        splat = SplatDisk(means, quats, torch.exp(log_scales), opacities, sh, disks.is_sky, scene.sh_degree)
        out = render(splat, camera)
        return torch.cat([out.color.reshape(-1), out.depth_sum.reshape(-1), out.normal.reshape(-1), out.alpha.reshape(-1)])

    inputs = [
        t.detach().clone().requires_grad_(True)
        for t in (disks.means, disks.quats, scene.log_scales, disks.opacities, disks.sh)
    ]
    assert int((rendered(*inputs)[-64:] > 0).sum()) > 32
    assert gradient_check(rendered, inputs, eps=1e-6, atol=1e-6, rtol=1e-3)


def test_single_splat_color_gradient_in_opacity():
    quats = np.array([[1.0, 0.2, -0.1, 0.05]])
    disks = disk_scene([[0.1, -0.05, 2.0]], quats=quats, scales=0.6).disks()
    with torch.no_grad():
        disks.sh[0, 0] = rgb_to_sh_dc(torch.tensor([0.8, 0.3, 0.6]))
    camera = facing_camera(8, 8)

    def color(opacities):
        splat = SplatDisk(disks.means.detach(), disks.quats.detach(), disks.scales.detach(), opacities, disks.sh.detach(), disks.is_sky)
        return render(splat, camera).color

    opacity = torch.tensor([0.55], requires_grad=True)
    assert gradient_check(color, [opacity], eps=1e-6, atol=1e-8, rtol=1e-4)


def test_zero_adjoint_gives_zero_gradients():
    scene = cluttered_scene()
    camera = facing_camera(10, 10, 9.0)
    grads = render_backward(scene, camera, {"color": torch.zeros(10, 10, 3)})
    for name, grad in grads.items():
        assert torch.equal(grad, torch.zeros_like(grad)), name


def test_render_backward_matches_autograd():
    scene = cluttered_scene()
    camera = facing_camera(10, 10, 9.0)
    adjoint = torch.randn(10, 10, 3, generator=seed_everything(1))
    grads = render_backward(scene, camera, {"color": adjoint})
    (render(scene, camera).color * adjoint).sum().backward()
    for name, p in scene.param_dict().items():
        assert torch.allclose(grads[name], p.grad), name
    with pytest.raises(NonFiniteError):
        render_backward(scene, camera, {"color": torch.full((10, 10, 3), math.nan)})


def test_view_space_gradient_ignores_points_behind_the_camera():
    camera = facing_camera()
    means = torch.tensor([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0]])
    grad = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    norms = view_space_gradient(means, grad, camera)
    assert float(norms[0]) > 0.0
    assert float(norms[1]) == 0.0


def test_ssim_and_color_loss():
    rng = np.random.default_rng(0)
    image = torch.as_tensor(rng.uniform(0, 1, (16, 16, 3)))
    assert torch.isclose(ssim_torch(image, image), torch.tensor(1.0))
    assert float(loss_color(image, image)) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_color(image, 1.0 - image)) > 0.1
    with pytest.raises(ValueError):
        loss_color(image, image[:8])


def test_color_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    rendered = torch.as_tensor(rng.uniform(0, 1, (8, 8, 3))).requires_grad_(True)
    gt = torch.as_tensor(rng.uniform(0, 1, (8, 8, 3)))
    assert gradient_check(lambda image: loss_color(image, gt), [rendered], eps=1e-6, atol=1e-8, rtol=1e-4)
