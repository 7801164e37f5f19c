import numpy as np
import pytest
import torch

from splatsdf.diff_core import seed_everything
from splatsdf.errors import DatasetError, EmptySceneError
from splatsdf.geometry_init import (
    TriangleMesh,
    color_pretrain,
    gram_schmidt_frames,
    init_sky,
    init_splats_from_sdf,
    init_splats_random,
    marching_cubes,
)
from splatsdf.splat_scene import quat_to_frame
from splatsdf.synth_data import make_scene

from conftest import SphereField, disk_scene, facing_camera


def test_marching_cubes_on_a_sphere():
    mesh = marching_cubes(make_scene("sphere"), 0.107)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(radii - 1.0) < 0.02)
    assert mesh.is_watertight()
    assert np.all(mesh.areas() > 0)


def test_marching_cubes_without_sign_change_is_empty():
    mesh = marching_cubes(SphereField(radius=5.0), 0.25)
    assert mesh.is_empty and len(mesh.vertices) == 0
    with pytest.raises(ValueError):
        marching_cubes(SphereField(), 0.0)


def test_mesh_export_and_load(tmp_path):
    mesh = marching_cubes(SphereField(), 0.2)
    for ascii in (False, True):
        path = str(tmp_path / f"mesh_{ascii}.ply")
        mesh.export(path, ascii=ascii)
        loaded = TriangleMesh.load(path)
        assert np.allclose(loaded.vertices, mesh.vertices, atol=1e-6)
        assert np.array_equal(loaded.triangles, mesh.triangles)


def test_cleanup_drops_degenerate_triangles():
    mesh = TriangleMesh(
        np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]]),
        np.array([[0, 1, 2], [0, 0, 1], [1, 2, 1]]),
    ).cleanup()
    assert len(mesh) == 1 and len(mesh.vertices) == 3
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


def test_init_from_sdf_orients_disks_along_the_gradient(sphere_field):
    cell = 0.15
    scene, report = init_splats_from_sdf(sphere_field, cell)
    means = scene.means.detach()
    _, _, normals = quat_to_frame(scene.quats.detach())
    radial = means / means.norm(dim=-1, keepdim=True)
    assert report.vertices == len(scene) > 0
    assert torch.all((normals * radial).sum(-1) > 0.999)
    assert torch.allclose(torch.exp(scene.log_scales), torch.full((len(scene), 2), cell))
    assert not scene.is_sky.any()

    s = means.norm(dim=-1) - 1.0
    assert np.allclose(report.opacities, torch.exp(-s * s / sphere_field.beta).numpy())
    assert torch.allclose(torch.sigmoid(scene.opacity_logits.detach()), torch.as_tensor(report.opacities), atol=2e-6)


def test_init_from_sdf_needs_a_surface():
    with pytest.raises(EmptySceneError):
        init_splats_from_sdf(SphereField(radius=5.0), 0.25)


def test_gram_schmidt_fallback():
    normals = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    probes = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    t_u, t_v, fallbacks = gram_schmidt_frames(normals, probes)
    assert fallbacks == 1
    assert np.allclose(np.cross(t_u, t_v), normals)
    assert np.allclose(t_u[1], [0.0, 1.0, 0.0])


def test_sky_shell():
    bounds = (np.array([-1.0, -2.0, 0.0]), np.array([1.0, 2.0, 2.0]))
    sky = init_sky(bounds, 50, radius_factor=2.0, color=(0.5, 0.6, 0.9))
    center = np.array([0.0, 0.0, 1.0])
    radius = 2.0 * np.linalg.norm([2.0, 4.0, 2.0]) / 2.0
    means = sky.means.detach().numpy()
    assert np.allclose(np.linalg.norm(means - center, axis=1), radius)
    assert sky.is_sky.all()
    _, _, normals = quat_to_frame(sky.quats.detach())
    inward = (center - means) / radius
    assert np.all(np.sum(normals.numpy() * inward, axis=1) > 0.999)
    assert np.allclose(torch.sigmoid(sky.opacity_logits).detach().numpy(), 1.0, atol=1e-5)
    with pytest.raises(ValueError):
        init_sky(bounds, 0)


def test_random_init():
    points = np.random.default_rng(0).normal(size=(30, 3))
    scene = init_splats_random(points, 12, 0.05, seed_everything(0))
    assert len(scene) == 12
    means = scene.means.detach().numpy()
    assert np.all(np.linalg.norm(means[:, None] - points[None], axis=-1).min(axis=1) < 1e-12)
    with pytest.raises(EmptySceneError):
        init_splats_random(np.zeros((0, 3)), 3, 0.05, seed_everything(0))


def test_color_pretrain_only_moves_colors():
    scene = disk_scene([[0.0, 0.0, 2.0], [0.3, 0.1, 2.5]], scales=1.0, opacities=0.9)
    camera = facing_camera(8, 8).with_image(np.full((8, 8, 3), [0.9, 0.2, 0.1]))
    frozen = {name: p.detach().clone() for name, p in scene.param_dict().items() if name != "sh"}
    sh_before = scene.sh.detach().clone()

    losses = color_pretrain(scene, [camera] * 5, epochs=2, lr=0.05)
    assert len(losses) == 10
    assert losses[-1] < losses[0]
    for name, value in frozen.items():
        assert torch.equal(getattr(scene, name), value), name
        assert getattr(scene, name).requires_grad
    assert not torch.equal(scene.sh, sh_before)
    with pytest.raises(DatasetError):
        color_pretrain(scene, [])
