import math

import numpy as np
import pytest
import torch
import trimesh

from conftest import disk_scene, facing_camera
from splatsdf import evalkit
from splatsdf.geometry_init import TriangleMesh
from splatsdf.rasterizer import render, ssim_torch


def brute_force_chamfer(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return 0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean()


def box_mesh(size=1.0, offset=0.0):
    box = trimesh.creation.box(extents=(size, size, size))
    return TriangleMesh(np.asarray(box.vertices) + offset, np.asarray(box.faces))


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(0)
    for n, m in ((10, 10), (50, 20), (1, 30)):
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        assert math.isclose(evalkit.chamfer_l1(a, b), brute_force_chamfer(a, b), rel_tol=1e-9)
    a = rng.normal(size=(20, 3))
    assert evalkit.chamfer_l1(a, a) == 0.0


def test_f_score():
    points = np.random.default_rng(1).uniform(size=(100, 3))
    assert evalkit.f_score(points, points, 0.01) == 100.0
    assert evalkit.f_score(points, points + 10.0, 0.01) == 0.0

    # half of the prediction is matched, all of the ground truth is covered
    pred = np.concatenate([points, points + 10.0])
    precision, recall = evalkit.precision_recall(pred, points, 0.01)
    assert (precision, recall) == (0.5, 1.0)
    assert math.isclose(evalkit.f_score(pred, points, 0.01), 100.0 * 2.0 / 3.0)

    for pred, gt in ((np.zeros((0, 3)), points), (points, np.zeros((0, 3)))):
        with pytest.raises(ValueError, match="empty"):
            evalkit.f_score(pred, gt, 0.01)
        with pytest.raises(ValueError, match="empty"):
            evalkit.chamfer_l1(pred, gt)


def test_psnr():
    image = np.random.default_rng(2).uniform(size=(8, 8, 3))
    assert evalkit.psnr(image, image) == math.inf
    assert math.isclose(evalkit.psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)), 20.0)
    assert math.isclose(evalkit.psnr(torch.zeros(4, 4, 3), torch.full((4, 4, 3), 0.1)), 20.0)
    with pytest.raises(ValueError):
        evalkit.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim():
    image = np.random.default_rng(3).uniform(size=(16, 16, 3))
    assert math.isclose(evalkit.ssim(image, image), 1.0)

    checker = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)
    assert evalkit.ssim(checker, 1.0 - checker) < 0.0
    assert evalkit.ssim(image, np.clip(image + 0.05, 0.0, 1.0)) < 1.0


def test_ssim_of_images_smaller_than_the_window():
    rng = np.random.default_rng(5)
    # a 14 px wide camera cropped by 2 px on each side
    image = evalkit.crop_border(rng.uniform(size=(12, 14, 3)), 2)
    assert image.shape[:2] == (8, 10)
    assert math.isclose(evalkit.ssim(image, image), 1.0)

    other = np.clip(image + rng.normal(0.0, 0.1, image.shape), 0.0, 1.0)
    score = evalkit.ssim(image, other)
    assert -1.0 < score < 1.0
    expected = ssim_torch(
        torch.as_tensor(image.mean(axis=-1))[..., None], torch.as_tensor(other.mean(axis=-1))[..., None],
    )
    assert math.isclose(score, float(expected), rel_tol=1e-12)


def test_evaluate_mesh():
    mesh = box_mesh()
    metrics = evalkit.evaluate_mesh(mesh, box_mesh(), threshold=0.01, count=2000, seed=3)
    assert metrics["chamfer_l1"] == 0.0
    assert metrics["f_score"] == 100.0

    moved = evalkit.evaluate_mesh(box_mesh(offset=0.5), mesh, threshold=0.01, count=2000)
    assert moved["chamfer_l1"] > 0.05
    assert moved["f_score"] < 100.0

    with pytest.raises(ValueError, match="empty mesh"):
        evalkit.sample_mesh_points(TriangleMesh.empty())


def test_sample_mesh_points_is_seeded():
    mesh = box_mesh()
    a = evalkit.sample_mesh_points(mesh, 500, seed=7)
    b = evalkit.sample_mesh_points(mesh, 500, seed=7)
    assert a.shape == (500, 3) and np.array_equal(a, b)
    assert np.all(np.abs(a) <= 0.5 + 1e-12)


def test_evaluate_renders(tmp_path):
    camera = facing_camera(width=16, height=16, focal=16.0)
    scene = disk_scene([[0.0, 0.0, 2.0]], scales=1.0)
    with torch.no_grad():
        image = render(scene, camera).color.clamp(0.0, 1.0).numpy()
    metrics = evalkit.evaluate_renders(scene, [camera.with_image(image)], crop=2, out_dir=str(tmp_path))
    assert metrics["psnr"] == math.inf
    assert math.isclose(metrics["ssim"], 1.0)
    assert metrics["views"] == 1
    for name in ("000000_color.png", "000000_depth.png", "000000_normal.png", "depth_scale.txt", "views.csv"):
        assert (tmp_path / name).is_file(), name

    with pytest.raises(ValueError):
        evalkit.evaluate_renders(scene, [])


def test_report_round_trip(tmp_path):
    metrics = {"splats": 1200, "psnr": math.inf, "ssim": 0.875, "chamfer_l1": 0.0123}
    evalkit.write_report(str(tmp_path), metrics)
    assert evalkit.read_report(str(tmp_path)) == metrics
    assert evalkit.read_report(str(tmp_path / "report.csv")) == metrics
    summary = (tmp_path / "summary.txt").read_text().splitlines()
    assert summary[0].split() == ["splats", "1200"]
    assert summary[1].split() == ["psnr", "inf"]


def test_comparison_table(tmp_path):
    results = {
        "render": {"psnr": 25.5, "ssim": 0.8},
        "render+shape": {"psnr": 26.25, "ssim": 0.85, "chamfer_l1": 0.02},
    }
    lines = evalkit.comparison_table(results).splitlines()
    assert lines[0].split() == ["variant", "psnr", "ssim", "chamfer_l1"]
    assert lines[1].split() == ["render", "25.5", "0.8", "nan"]
    assert lines[2].split() == ["render+shape", "26.25", "0.85", "0.02"]

    path = tmp_path / "ablation.csv"
    evalkit.write_comparison(str(path), results)
    assert path.read_text().splitlines()[2] == "render+shape,26.25,0.85,0.02"
