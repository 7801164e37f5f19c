"""Mesh and image metrics plus the evaluation report writers."""
import os
import csv
import math
import logging

import numpy as np
import torch
import trimesh
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from splatsdf.rasterizer import render, ssim_torch
from splatsdf.utils import imageio

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 100000
REPORT_FILENAME = "report.csv"
SUMMARY_FILENAME = "summary.txt"
# skimage derives an 11 px window from sigma 1.5 and rejects smaller images
SSIM_WINDOW = 11


def _points(points, name):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError(f"{name} point set is empty")
    return points


def nearest_distances(source, target):
    """Distance from every ``source`` point to its exact nearest ``target`` point."""
    distances, _ = cKDTree(target).query(source, k=1)
    return distances


def chamfer_l1(pred, gt):
    """Symmetric mean nearest-neighbor distance, in world units."""
    pred, gt = _points(pred, "Predicted"), _points(gt, "Ground-truth")
    return 0.5 * float(nearest_distances(pred, gt).mean()) + 0.5 * float(nearest_distances(gt, pred).mean())


def precision_recall(pred, gt, threshold):
    pred, gt = _points(pred, "Predicted"), _points(gt, "Ground-truth")
    precision = float(np.mean(nearest_distances(pred, gt) < threshold))
    recall = float(np.mean(nearest_distances(gt, pred) < threshold))
    return precision, recall


def f_score(pred, gt, threshold):
    """Harmonic mean of precision and recall at ``threshold``, as a percentage.

    Parameters
    ----------
    pred, gt : array_like
        (N, 3) and (M, 3) point sets, both nonempty.
    threshold : float
        Distance under which a point counts as matched.
    """
    precision, recall = precision_recall(pred, gt, threshold)
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def _image(image):
    if torch.is_tensor(image):
        image = image.detach().cpu().double().numpy()
    return np.asarray(image, dtype=np.float64)


def psnr(a, b):
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``inf``."""
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise ValueError(f"PSNR inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows of the channel-mean images.

    Images narrower than the window on either side use the zero-padded windows of
    ``ssim_torch``, the same fallback the training loss uses.
    """
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if min(a.shape) < SSIM_WINDOW:
        return float(ssim_torch(torch.as_tensor(a)[..., None], torch.as_tensor(b)[..., None], window_size=SSIM_WINDOW))
    return float(structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def sample_mesh_points(mesh, count=DEFAULT_SAMPLES, seed=0):
    """Area-weighted surface samples, reproducible for a fixed ``seed``."""
    tm = mesh.to_trimesh() if hasattr(mesh, "to_trimesh") else mesh
    if len(tm.faces) == 0:
        raise ValueError("Cannot sample points from an empty mesh")
    points, _ = trimesh.sample.sample_surface(tm, count, seed=seed)
    return np.asarray(points, dtype=np.float64)


def evaluate_mesh(pred_mesh, gt_mesh, threshold, count=DEFAULT_SAMPLES, seed=0):
    pred = sample_mesh_points(pred_mesh, count, seed)
    gt = sample_mesh_points(gt_mesh, count, seed)
    precision, recall = precision_recall(pred, gt, threshold)
    metrics = {
        "chamfer_l1": chamfer_l1(pred, gt),
        "f_score": f_score(pred, gt, threshold),
        "precision": 100.0 * precision,
        "recall": 100.0 * recall,
    }
    logger.info(f"Mesh: C-L1 {metrics['chamfer_l1']:.5f}, F-score {metrics['f_score']:.2f} at {threshold:g}")
    return metrics


def crop_border(image, border):
    if border <= 0:
        return image
    return image[border:-border, border:-border]


def save_render(out, directory, frame_id, depth_scale):
    stem = os.path.join(directory, f"{frame_id:06d}")
    imageio.save_rgb(f"{stem}_color.png", out.color.clamp(0.0, 1.0))
    imageio.save_depth16(f"{stem}_depth.png", out.depth, depth_scale)
    normal = out.normal / out.normal.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    imageio.save_normal(f"{stem}_normal.png", normal)


def evaluate_renders(scene, cameras, crop=2, out_dir=None, background=None):
    """Render every camera and score it against its image with a ``crop`` pixel border removed.

    When ``out_dir`` is given, color, 16-bit depth (with ``depth_scale.txt``) and normal
    PNGs and a per-view ``views.csv`` are written there.
    """
    cameras = list(cameras)
    if not cameras:
        raise ValueError("No views to evaluate")
    rows, outputs = [], []
    with torch.no_grad():
        for camera in cameras:
            out = render(scene, camera, background=background)
            predicted = out.color.clamp(0.0, 1.0)
            rows.append({
                "frame_id": camera.frame_id,
                "psnr": psnr(crop_border(predicted, crop), crop_border(camera.image, crop)),
                "ssim": ssim(crop_border(predicted, crop), crop_border(camera.image, crop)),
            })
            outputs.append(out)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        depth_scale = imageio.depth_scale_for(np.stack([_image(out.depth) for out in outputs]))
        with open(os.path.join(out_dir, "depth_scale.txt"), "w") as f:
            f.write(f"{depth_scale:.17g}\n")
        for camera, out in zip(cameras, outputs):
            save_render(out, out_dir, camera.frame_id, depth_scale)
        with open(os.path.join(out_dir, "views.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["frame_id", "psnr", "ssim"])
            writer.writeheader()
            writer.writerows(rows)

    finite = [row["psnr"] for row in rows if math.isfinite(row["psnr"])]
    metrics = {
        "psnr": float(np.mean(finite)) if finite else math.inf,
        "ssim": float(np.mean([row["ssim"] for row in rows])),
        "views": len(rows),
    }
    logger.info(f"Renders: PSNR {metrics['psnr']:.2f} dB, SSIM {metrics['ssim']:.4f} over {len(rows)} views")
    return metrics


def _format(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.10g}"
    return str(value)


def write_report(out_dir, metrics):
    """``report.csv`` (metric,value) and a human-readable ``summary.txt``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, REPORT_FILENAME), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, _format(value)])
    with open(os.path.join(out_dir, SUMMARY_FILENAME), "w") as f:
        f.write(format_summary(metrics))


def read_report(path):
    if os.path.isdir(path):
        path = os.path.join(path, REPORT_FILENAME)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        return {name: _parse(value) for name, value in reader}


def _parse(value):
    try:
        return int(value)
    except ValueError:
        return float(value)


def format_summary(metrics):
    width = max(len(name) for name in metrics) if metrics else 0
    lines = [f"{name.ljust(width)}  {_format(value)}" for name, value in metrics.items()]
    return "\n".join(lines) + "\n"


def comparison_table(results, columns=("psnr", "ssim", "chamfer_l1")):
    """Plain-text table with one row per variant and one column per metric."""
    header = ["variant", *columns]
    rows = [[variant, *(_format(metrics.get(column, math.nan)) for column in columns)] for variant, metrics in results.items()]
    widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows)]
    lines = ["  ".join(str(cell).ljust(width) for cell, width in zip(line, widths)) for line in [header, *rows]]
    return "\n".join(lines) + "\n"


def write_comparison(path, results, columns=("psnr", "ssim", "chamfer_l1")):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", *columns])
        for variant, metrics in results.items():
            writer.writerow([variant, *(_format(metrics.get(column, math.nan)) for column in columns)])
