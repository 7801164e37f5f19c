"""Analytic ground-truth scenes, sphere-traced LiDAR and a reference ray-cast camera."""
import os
import math
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from splatsdf.errors import DatasetError
from splatsdf.sdf_field import RayPool

logger = logging.getLogger(__name__)

TRACE_TOLERANCE = 1e-6
TRACE_MAX_STEPS = 512
LIGHT_DIRECTION = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
AMBIENT = 0.3
WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Sphere:
    center: Tuple[float, float, float]
    radius: float

    def sdf(self, points):
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box:
    center: Tuple[float, float, float]
    half_size: Tuple[float, float, float]

    def sdf(self, points):
        q = np.abs(points - np.asarray(self.center)) - np.asarray(self.half_size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass
class InvertedBox(Box):
    """Room interior: negative outside the box, positive inside."""

    def sdf(self, points):
        return -super().sdf(points)


@dataclass
class Plane:
    normal: Tuple[float, float, float]
    offset: float = 0.0

    def sdf(self, points):
        n = np.asarray(self.normal, dtype=np.float64)
        return points @ (n / np.linalg.norm(n)) - self.offset


@dataclass
class Subtraction:
    """``base`` with ``cut`` carved out."""
    base: object
    cut: object

    def sdf(self, points):
        return np.maximum(self.base.sdf(points), -self.cut.sdf(points))


@dataclass
class AnalyticScene:
    """Union (min) of primitives, each with an RGB albedo."""
    name: str
    primitives: List[object]
    albedos: List[Tuple[float, float, float]]
    bounds: Tuple[np.ndarray, np.ndarray]
    sky_color: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if len(self.primitives) != len(self.albedos):
            raise ValueError("Every primitive needs an albedo")
        self.bounds = (np.asarray(self.bounds[0], dtype=np.float64), np.asarray(self.bounds[1], dtype=np.float64))

    def distances(self, points):
        points = np.asarray(points, dtype=np.float64)
        return np.stack([p.sdf(points) for p in self.primitives], axis=-1)

    def evaluate(self, points):
        return self.distances(points).min(axis=-1)

    def closest_primitive(self, points):
        return self.distances(points).argmin(axis=-1)

    def albedo(self, points):
        return np.asarray(self.albedos, dtype=np.float64)[self.closest_primitive(points)]

    def gradient(self, points, h=1e-6):
        """Central-difference gradient of the scene distance."""
        points = np.asarray(points, dtype=np.float64)
        grad = np.empty_like(points)
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            grad[..., axis] = (self.evaluate(points + offset) - self.evaluate(points - offset)) / (2.0 * h)
        return grad


def make_scene(name):
    """Built-in scenes: ``sphere``, ``box_room`` and ``street``."""
    if name == "sphere":
        return AnalyticScene(
            name, [Sphere((0.0, 0.0, 0.0), 1.0)], [(0.8, 0.35, 0.25)],
            bounds=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
        )
    if name == "box_room":
        return AnalyticScene(
            name,
            [
                InvertedBox((0.0, 0.0, 1.5), (3.0, 3.0, 1.5)),
                Box((1.2, 0.8, 0.4), (0.4, 0.4, 0.4)),
                Box((-1.0, -1.1, 0.5), (0.5, 0.3, 0.5)),
            ],
            [(0.85, 0.82, 0.75), (0.75, 0.25, 0.2), (0.2, 0.45, 0.8)],
            bounds=((-3.2, -3.2, -0.2), (3.2, 3.2, 3.2)),
        )
    if name == "street":
        return AnalyticScene(
            name,
            [
                Plane((0.0, 0.0, 1.0), 0.0),
                Box((-5.0, 4.0, 2.0), (2.0, 1.5, 2.0)),
                Box((1.0, 4.5, 1.5), (2.5, 1.5, 1.5)),
                Box((6.0, 4.0, 2.5), (1.5, 1.5, 2.5)),
                Box((-3.0, -4.5, 1.5), (2.5, 1.5, 1.5)),
                Box((4.0, -4.0, 2.0), (2.0, 1.5, 2.0)),
            ],
            [(0.45, 0.45, 0.45), (0.8, 0.6, 0.4), (0.6, 0.7, 0.5), (0.7, 0.4, 0.4), (0.5, 0.55, 0.75), (0.8, 0.75, 0.55)],
            bounds=((-9.0, -6.5, -0.5), (9.0, 6.5, 5.5)),
            sky_color=(0.6, 0.75, 0.95),
        )
    raise ValueError(f"Unknown scene {name!r}; choose from sphere, box_room, street")


def sphere_trace(scene, origins, directions, max_range, tolerance=TRACE_TOLERANCE, max_steps=TRACE_MAX_STEPS):
    """March rays by the scene distance until within ``tolerance`` of a surface.

    Returns hit distances (``max_range`` for misses) and the hit mask.
    """
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    t = np.zeros(len(directions))
    hit = np.zeros(len(directions), dtype=bool)
    active = np.ones(len(directions), dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        d = scene.evaluate(origins[idx] + t[idx, None] * directions[idx])
        close = np.abs(d) < tolerance
        hit[idx[close]] = True
        t[idx] += np.where(close, 0.0, d)
        active[idx[close]] = False
        active &= t <= max_range
    missed = ~hit | (t > max_range)
    t[missed] = max_range
    return t, ~missed


@dataclass
class LidarSpec:
    """Spinning multi-beam sensor."""
    beams: int = 32
    azimuth_steps: int = 360
    fov_up: float = 30.0
    fov_down: float = -30.0
    max_range: float = 30.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    every: int = 1

    def directions(self):
        elevation = np.radians(np.linspace(self.fov_down, self.fov_up, self.beams))
        azimuth = np.linspace(0.0, 2.0 * math.pi, self.azimuth_steps, endpoint=False)
        el, az = np.meshgrid(elevation, azimuth, indexing="ij")
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


@dataclass
class LidarScan:
    """One sweep: unit ray directions, measured distances and the mask of returns."""
    origin: np.ndarray
    directions: np.ndarray
    distances: np.ndarray
    max_range: float = math.inf
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if self.valid is None:
            self.valid = np.ones(len(self.distances), dtype=bool)
        if not (np.all(np.isfinite(self.distances)) and np.all(np.isfinite(self.directions))):
            raise ValueError("LiDAR scan contains non-finite values")
        if np.any(self.distances > self.max_range):
            raise ValueError("LiDAR distance exceeds the sensor max range")

    def __len__(self):
        return int(self.valid.sum())

    def endpoints(self):
        return self.origin + self.directions[self.valid] * self.distances[self.valid, None]

    @classmethod
    def from_endpoints(cls, origin, endpoints, max_range=math.inf):
        offsets = np.asarray(endpoints, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
        distances = np.linalg.norm(offsets, axis=1)
        keep = distances > 0
        return cls(origin, offsets[keep] / distances[keep, None], distances[keep], max_range)


def concatenate_scans(scans):
    """Pool the returns of several scans into one ray set with per-ray origins."""
    return RayPool.from_scans(scans)


def simulate_lidar(scene, origin, spec, rng):
    """Sphere-trace every beam of ``spec`` from ``origin`` with optional noise and dropout."""
    directions = spec.directions()
    t, hit = sphere_trace(scene, origin, directions, spec.max_range)
    if spec.noise_sigma > 0:
        t = np.clip(t + rng.normal(0.0, spec.noise_sigma, size=t.shape), 0.0, spec.max_range)
    if spec.dropout > 0:
        hit &= rng.random(len(t)) >= spec.dropout
    return LidarScan(origin, directions, t, spec.max_range, hit)


@dataclass
class CameraSpec:
    width: int = 160
    height: int = 120
    fov_deg: float = 60.0

    def intrinsics(self):
        f = (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)
        return f, f, self.width / 2.0, self.height / 2.0


def look_at(eye, target, up=WORLD_UP):
    """World-from-camera pose looking from ``eye`` at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


@dataclass
class TrajectorySpec:
    """Camera path: ``orbit`` around ``target`` or ``lawnmower`` sweeps along x."""
    kind: str = "orbit"
    frames: int = 48
    radius: float = 3.0
    height: float = 0.8
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    extent: Tuple[float, float] = (6.0, 2.0)
    rows: int = 2

    def poses(self):
        target = np.asarray(self.target, dtype=np.float64)
        if self.kind == "orbit":
            angles = np.linspace(0.0, 2.0 * math.pi, self.frames, endpoint=False)
            # alternate the height so the orbit sees the target from above and below
            heights = self.height * np.where(np.arange(self.frames) % 2 == 0, 1.0, -0.5)
            return [
                look_at(target + np.array([self.radius * math.cos(a), self.radius * math.sin(a), h]), target)
                for a, h in zip(angles, heights)
            ]
        if self.kind == "lawnmower":
            per_row = max(self.frames // self.rows, 1)
            poses = []
            for row in range(self.rows):
                y = target[1] + (np.linspace(-self.extent[1], self.extent[1], self.rows)[row] if self.rows > 1 else 0.0)
                xs = np.linspace(-self.extent[0], self.extent[0], per_row) + target[0]
                if row % 2:
                    xs = xs[::-1]
                heading = -1.0 if row % 2 else 1.0
                for i, x in enumerate(xs):
                    eye = np.array([x, y, target[2] + self.height])
                    # look ahead and slightly sideways so both street sides are seen
                    side = 1.5 * math.sin(2.0 * math.pi * i / max(per_row, 1))
                    poses.append(look_at(eye, eye + np.array([heading * 4.0, side, -0.3])))
            return poses
        raise ValueError(f"Unknown trajectory kind {self.kind!r}")


def default_specs(name):
    """Trajectory, camera and LiDAR settings matched to each built-in scene."""
    if name == "sphere":
        return TrajectorySpec("orbit", 48, radius=3.0, height=1.2), CameraSpec(), LidarSpec(max_range=10.0, fov_up=30.0, fov_down=-30.0)
    if name == "box_room":
        return (
            TrajectorySpec("orbit", 72, radius=1.6, height=0.4, target=(0.0, 0.0, 1.4)),
            CameraSpec(fov_deg=75.0),
            LidarSpec(max_range=12.0, fov_up=60.0, fov_down=-60.0, beams=48, every=2),
        )
    if name == "street":
        return (
            TrajectorySpec("lawnmower", 48, height=1.6, extent=(6.0, 0.8), rows=2),
            CameraSpec(fov_deg=80.0),
            LidarSpec(max_range=25.0, fov_up=15.0, fov_down=-25.0, every=2),
        )
    raise ValueError(f"Unknown scene {name!r}")


@dataclass
class ReferenceImage:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    hit: np.ndarray


def render_reference_image(scene, camera, max_range=100.0):
    """Ray-cast Lambertian image with exact depth (camera z) and normals."""
    origin, dirs, view_cos = camera.rays()
    flat = dirs.reshape(-1, 3)
    t, hit = sphere_trace(scene, origin, flat, max_range)
    points = origin + t[:, None] * flat
    color = np.zeros_like(flat)
    if scene.sky_color is not None:
        color[:] = scene.sky_color
    normal = np.zeros_like(flat)
    if hit.any():
        grad = scene.gradient(points[hit])
        n = grad / np.linalg.norm(grad, axis=1, keepdims=True)
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(n @ LIGHT_DIRECTION, 0.0, None)
        color[hit] = scene.albedo(points[hit]) * shade[:, None]
        normal[hit] = n
    depth = np.where(hit, t * view_cos.reshape(-1), 0.0)
    shape = (camera.height, camera.width)
    return ReferenceImage(
        np.clip(color, 0.0, 1.0).reshape(*shape, 3), depth.reshape(shape), normal.reshape(*shape, 3), hit.reshape(shape)
    )


def sample_extrapolation_poses(scene, n, rng, clearance=0.3, max_tries=10000):
    """Random free-space positions with random horizontal-ish look directions."""
    lo, hi = scene.bounds
    poses = []
    for _ in range(max_tries):
        if len(poses) == n:
            break
        eye = rng.uniform(lo, hi)
        if scene.evaluate(eye[None])[0] <= clearance:
            continue
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        pitch = rng.uniform(-math.pi / 6.0, math.pi / 6.0)
        direction = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)])
        poses.append(look_at(eye, eye + direction))
    if len(poses) < n:
        raise DatasetError(f"Found only {len(poses)} of {n} free-space extrapolation poses")
    return poses


def generate_dataset(
        scene,
        out_dir,
        trajectory=None,
        camera_spec=None,
        lidar_spec=None,
        seed=0,
        extrapolation=0,
        gt_mesh_cell=None,
    ):
    """Render and scan ``scene`` along a trajectory and write a dataset directory.

    Raises DatasetError naming the pose when a camera center lies inside geometry.
    """
    from splatsdf.geometry_init import marching_cubes
    from splatsdf.rasterizer import CameraFrame
    from splatsdf.utils.dataset import Dataset

    defaults = default_specs(scene.name) if scene.name in ("sphere", "box_room", "street") else (TrajectorySpec(), CameraSpec(), LidarSpec())
    trajectory = trajectory or defaults[0]
    camera_spec = camera_spec or defaults[1]
    lidar_spec = lidar_spec or defaults[2]
    rng = np.random.default_rng(seed)

    fx, fy, cx, cy = camera_spec.intrinsics()
    cameras, scans, depths, normals = [], [], [], []
    for frame_id, pose in enumerate(trajectory.poses()):
        eye = pose[:3, 3]
        if scene.evaluate(eye[None])[0] <= 0.0:
            raise DatasetError(f"Camera pose {frame_id} at {np.round(eye, 4).tolist()} lies inside geometry")
        camera = CameraFrame(fx, fy, cx, cy, camera_spec.width, camera_spec.height, pose, frame_id=frame_id)
        ref = render_reference_image(scene, camera)
        cameras.append(camera.with_image(ref.color))
        depths.append(ref.depth)
        normals.append(ref.normal)
        if frame_id % lidar_spec.every == 0:
            scans.append(simulate_lidar(scene, eye, lidar_spec, rng))

    cell = gt_mesh_cell or float(np.max(scene.bounds[1] - scene.bounds[0])) / 128.0
    gt_mesh = marching_cubes(scene, cell)
    extrapolation_poses = sample_extrapolation_poses(scene, extrapolation, rng) if extrapolation else []
    dataset = Dataset(out_dir, cameras, scans, gt_depths=depths, gt_normals=normals, gt_mesh=gt_mesh,
                      extrapolation_poses=extrapolation_poses)
    dataset.write()
    logger.info(f"Generated {scene.name} dataset in {out_dir}: {len(cameras)} views, {len(scans)} scans")
    return os.path.abspath(out_dir)
