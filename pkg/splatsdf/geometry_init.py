"""SDF-aided splat initialization: zero-level mesh, oriented disks, sky shell, color pretraining."""
import math
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import trimesh
from scipy.spatial.transform import Rotation
from skimage import measure
from tqdm import tqdm

from splatsdf.diff_core import adam_step, backward, build_adam
from splatsdf.errors import DatasetError, EmptySceneError
from splatsdf.rasterizer import loss_color, render
from splatsdf.splat_scene import SplatScene, rgb_to_sh_dc, sh_coefficient_count

logger = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-8
RANDOM_INIT_OPACITY = 0.1
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex normals."""
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("Triangle index out of range")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def cleanup(self, area_eps=1e-14):
        """Drop zero-area triangles and vertices no triangle references."""
        t = self.triangles
        repeated = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        keep = ~repeated & (self.areas() > area_eps)
        triangles = t[keep]
        used = np.unique(triangles)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        normals = None if self.normals is None else self.normals[used]
        return TriangleMesh(self.vertices[used], remap[triangles], normals)

    def edges(self):
        """Undirected edges (E, 2) and how many triangles share each."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_watertight(self):
        if self.is_empty:
            return False
        _, counts = self.edges()
        return bool(np.all(counts == 2))

    def to_trimesh(self):
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)

    def export(self, path, ascii=False):
        """Write a PLY file, binary little-endian unless ``ascii``."""
        data = trimesh.exchange.ply.export_ply(self.to_trimesh(), encoding="ascii" if ascii else "binary")
        with open(path, "wb") as ply_file:
            ply_file.write(data)
        logger.info(f"Wrote mesh with {len(self.vertices)} vertices, {len(self)} triangles to {path}")

    @classmethod
    def load(cls, path):
        mesh = trimesh.load(path, force="mesh", process=False)
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces))


def marching_cubes(field, cell_size, progress=False, method="lorensen"):
    """Triangulate the zero level set of ``field`` on a grid of spacing ``cell_size``.

    ``field`` is anything with ``bounds`` (min and max corners) and ``evaluate(points)``
    returning signed distances for an (N, 3) array. Vertices are edge-interpolated. A field
    without a sign change yields an empty mesh.
    """
    if cell_size <= 0:
        raise ValueError(f"Marching cubes cell size must be positive, got {cell_size}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in field.bounds)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("Marching cubes needs finite field bounds")
    counts = np.maximum(np.ceil((hi - lo) / cell_size).astype(int) + 1, 2)
    axes = [lo[i] + cell_size * np.arange(counts[i]) for i in range(3)]
    grid_y, grid_z = np.meshgrid(axes[1], axes[2], indexing="ij")
    slab = np.stack([np.zeros_like(grid_y), grid_y, grid_z], axis=-1).reshape(-1, 3)

    volume = np.empty(tuple(counts), dtype=np.float64)
    for i, x in enumerate(tqdm(axes[0], desc="Marching cubes", disable=not progress)):
        slab[:, 0] = x
        volume[i] = np.asarray(field.evaluate(slab)).reshape(counts[1], counts[2])

    if not (volume.min() < 0.0 < volume.max()):
        logger.warning("SDF has no sign change inside its bounds; mesh is empty")
        return TriangleMesh.empty()
    vertices, faces, _, _ = measure.marching_cubes(
        volume, level=0.0, spacing=(cell_size,) * 3, gradient_direction="ascent", method=method,
    )
    mesh = TriangleMesh(vertices + lo, faces).cleanup()
    logger.info(f"Marching cubes at cell {cell_size:g}: {len(mesh.vertices)} vertices, {len(mesh)} triangles")
    return mesh


def least_aligned_axis(normals):
    """World axis least aligned with each normal."""
    eye = np.eye(3)
    return eye[np.argmin(np.abs(normals), axis=1)]


def frames_to_quats(t_u, t_v, n):
    """(w, x, y, z) quaternions of the rotations whose columns are ``[t_u, t_v, n]``."""
    matrices = np.stack([t_u, t_v, n], axis=-1)
    xyzw = Rotation.from_matrix(matrices).as_quat()
    return np.concatenate([xyzw[:, 3:4], xyzw[:, :3]], axis=1)


def gram_schmidt_frames(normals, probes):
    """Right-handed frames with ``t_u`` the probe made orthogonal to the normal.

    Probes parallel to their normal fall back to the least-aligned world axis; the
    number of fallbacks is returned.
    """
    tangent = probes - np.sum(normals * probes, axis=1, keepdims=True) * normals
    length = np.linalg.norm(tangent, axis=1)
    parallel = length < DEGENERATE_EPS
    if parallel.any():
        fallback = least_aligned_axis(normals[parallel])
        fallback = fallback - np.sum(normals[parallel] * fallback, axis=1, keepdims=True) * normals[parallel]
        tangent[parallel] = fallback
        length[parallel] = np.linalg.norm(fallback, axis=1)
    t_u = tangent / length[:, None]
    t_v = np.cross(normals, t_u)
    return t_u, t_v, int(parallel.sum())


@dataclass
class InitReport:
    vertices: int
    degenerate_normals: int
    degenerate_probes: int
    opacities: np.ndarray


def _field_gradients(field, points, chunk_size=65536):
    grads = []
    for start in range(0, len(points), chunk_size):
        chunk = torch.as_tensor(points[start:start + chunk_size], dtype=field.bounds_min.dtype)
        grad, _ = field.gradient(chunk)
        grads.append(grad.detach().double().numpy())
    return np.concatenate(grads) if grads else np.zeros((0, 3))


def init_splats_from_sdf(field, cell_size, mesh=None, sh_degree=2, scale_min=1e-4, scale_max=1.0):
    """One disk per zero-level mesh vertex, oriented and weighted by the field.

    The normal is the normalized field gradient. The tangent ``t_u`` is the Hessian-normal
    product ``H n`` (finite differences of the gradient with step ``0.1 * cell_size``) made
    orthogonal to ``n``; ``t_v = n x t_u``. Both scales equal ``cell_size`` and the opacity
    is ``exp(-s^2 / beta)`` with ``(s, beta)`` queried at the vertex.

    Returns
    -------
    scene : SplatScene
        Non-sky disks with zero SH (mid gray).
    report : InitReport
        Vertex count, fallback counts and the exact emitted opacities.
    """
    if mesh is None:
        mesh = marching_cubes(field, cell_size)
    points = mesh.vertices
    if len(points) == 0:
        raise EmptySceneError("Marching cubes produced no vertices; cannot initialize splats")

    grads = _field_gradients(field, points)
    norms = np.linalg.norm(grads, axis=1)
    degenerate = norms < DEGENERATE_EPS
    normals = np.empty_like(grads)
    normals[~degenerate] = grads[~degenerate] / norms[~degenerate, None]
    if degenerate.any():
        fallback = mesh.to_trimesh().vertex_normals[degenerate]
        fallback_norm = np.linalg.norm(fallback, axis=1)
        fallback[fallback_norm < 0.5] = (0.0, 0.0, 1.0)
        normals[degenerate] = fallback / np.linalg.norm(fallback, axis=1, keepdims=True)

    h = 0.1 * cell_size
    hessian_normal = (_field_gradients(field, points + h * normals) - _field_gradients(field, points - h * normals)) / (2.0 * h)
    probe_norm = np.linalg.norm(hessian_normal, axis=1)
    flat = probe_norm < DEGENERATE_EPS
    probes = np.where(flat[:, None], np.array([1.0, 0.0, 0.0]), hessian_normal / np.maximum(probe_norm, DEGENERATE_EPS)[:, None])
    t_u, t_v, parallel = gram_schmidt_frames(normals, probes)
    quats = frames_to_quats(t_u, t_v, normals)

    with torch.no_grad():
        s, beta = field(torch.as_tensor(points, dtype=field.bounds_min.dtype))
        opacities = torch.exp(-(s * s) / beta).double().numpy()

    count = len(points)
    scene = SplatScene(
        means=points,
        quats=quats,
        scales=np.full((count, 2), cell_size),
        opacities=opacities,
        sh=np.zeros((count, sh_coefficient_count(sh_degree), 3)),
        sh_degree=sh_degree,
        scale_min=scale_min,
        scale_max=max(scale_max, cell_size),
    )
    report = InitReport(count, int(degenerate.sum()), int(flat.sum()) + parallel, opacities)
    if report.degenerate_normals or report.degenerate_probes:
        logger.warning(
            f"SDF init: {report.degenerate_normals} degenerate gradients, "
            f"{report.degenerate_probes} curvature-probe fallbacks"
        )
    logger.info(f"SDF init: {count} splats at scale {cell_size:g}, mean opacity {opacities.mean():.3f}")
    return scene, report


def fibonacci_sphere(n):
    """``n`` unit vectors on a Fibonacci spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = GOLDEN_ANGLE * np.arange(n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def init_sky(bounds, n_splats, radius_factor=2.0, color=None, sh_degree=2, scale_min=1e-4):
    """Opaque inward-facing shell of disks around the scene.

    The shell radius is ``radius_factor`` times the circumradius of ``bounds``. Each disk's
    scale ``s`` solves ``pi s^2 = 2 * 4 pi R^2 / n`` so neighbors overlap about twice.
    """
    if n_splats < 1:
        raise ValueError(f"Sky needs at least one splat, got {n_splats}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    center = (lo + hi) / 2.0
    radius = radius_factor * np.linalg.norm(hi - lo) / 2.0
    directions = fibonacci_sphere(n_splats)
    normals = -directions
    t_u, t_v, _ = gram_schmidt_frames(normals, least_aligned_axis(normals))
    scale = math.sqrt(2.0 * (4.0 * math.pi * radius ** 2 / n_splats) / math.pi)
    sh = np.zeros((n_splats, sh_coefficient_count(sh_degree), 3))
    if color is not None:
        sh[:, 0, :] = rgb_to_sh_dc(np.asarray(color, dtype=np.float64))
    logger.info(f"Sky: {n_splats} splats on radius {radius:g}, scale {scale:g}")
    return SplatScene(
        means=center + radius * directions,
        quats=frames_to_quats(t_u, t_v, normals),
        scales=np.full((n_splats, 2), scale),
        opacities=np.ones(n_splats),
        sh=sh,
        is_sky=np.ones(n_splats, dtype=bool),
        sh_degree=sh_degree,
        scale_min=min(scale_min, scale),
        scale_max=scale,
    )


def init_splats_random(points, n_splats, scale, generator, sh_degree=2, scale_min=1e-4, scale_max=1.0):
    """Baseline initialization: disks at random LiDAR endpoints with random orientation."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptySceneError("No points to draw a random initialization from")
    pick = torch.randint(0, len(points), (n_splats,), generator=generator).numpy()
    quats = torch.randn((n_splats, 4), generator=generator, dtype=torch.float64).numpy()
    logger.info(f"Random init: {n_splats} splats at scale {scale:g}")
    return SplatScene(
        means=points[pick],
        quats=quats,
        scales=np.full((n_splats, 2), scale),
        opacities=np.full(n_splats, RANDOM_INIT_OPACITY),
        sh=np.zeros((n_splats, sh_coefficient_count(sh_degree), 3)),
        sh_degree=sh_degree,
        scale_min=scale_min,
        scale_max=max(scale_max, scale),
    )


def color_pretrain(scene, cameras, epochs=1, lr=0.025, ssim_weight=0.2, background=None):
    """Fit only the SH coefficients for ``epochs`` passes over ``cameras``.

    Positions, rotations, scales and opacities are frozen and stay bitwise unchanged.
    Returns the per-view photometric losses in visiting order.
    """
    cameras = list(cameras)
    if not cameras:
        raise DatasetError("Color pretraining needs at least one training image")
    structural = [p for name, p in scene.param_dict().items() if name != "sh"]
    flags = [p.requires_grad for p in structural]
    for p in structural:
        p.requires_grad_(False)
    optimizer = build_adam({"sh": ([scene.sh], lr)})
    losses = []
    step = 0
    try:
        for _ in range(epochs):
            for camera in cameras:
                out = render(scene, camera, background=background)
                loss = loss_color(out, camera.image, ssim_weight)
                backward(loss, [("sh", scene.sh)])
                step += 1
                adam_step(optimizer, step)
                losses.append(float(loss))
    finally:
        for p, flag in zip(structural, flags):
            p.requires_grad_(flag)
    logger.info(f"Color pretrain: {step} views, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return losses
