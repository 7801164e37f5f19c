"""Reader and writer for the on-disk dataset layout.

::

    intrinsics.txt            fx fy cx cy width height
    poses.txt                 frame_id tx ty tz qx qy qz qw   (world-from-camera)
    images/%06d.png           8-bit RGB
    lidar/%06d.ply            binary little-endian PLY, vertex x y z (world endpoints)
    lidar/origins.txt         one "x y z" sensor origin per scan
    gt/depth/%06d.png         optional 16-bit depth, scaled by gt/depth_scale.txt
    gt/normal/%06d.png        optional world normals mapped to [0, 255]
    gt/gt_mesh.ply            optional reference surface
    extrapolation_poses.txt   optional held-out poses, same line format as poses.txt
"""
import os
import glob
import logging

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError
from scipy.spatial.transform import Rotation

from splatsdf.errors import DatasetError
from splatsdf.geometry_init import TriangleMesh
from splatsdf.rasterizer import CameraFrame
from splatsdf.synth_data import LidarScan
from splatsdf.utils import imageio

logger = logging.getLogger(__name__)

QUATERNION_TOLERANCE = 1e-6
FRAME_PATTERN = "{:06d}"


def pose_to_line(frame_id, pose):
    """
    Format a world-from-camera pose as a poses.txt line.

    Args:
        frame_id (int): Frame index.
        pose (np.ndarray): 4x4 rigid transform.

    Returns:
        str: ``frame_id tx ty tz qx qy qz qw``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    quat = Rotation.from_matrix(pose[:3, :3]).as_quat()
    values = " ".join(f"{value:.17g}" for value in (*pose[:3, 3], *quat))
    return f"{int(frame_id)} {values}"


def line_to_pose(line, source="poses.txt", line_number=None):
    """
    Parse a single poses.txt line.

    Args:
        line (str): ``frame_id tx ty tz qx qy qz qw``.
        source (str): File name used in error messages.
        line_number (int): Line number used in error messages.

    Returns:
        tuple: (frame_id, 4x4 pose).
    """
    where = f"{source}:{line_number}" if line_number is not None else source
    fields = line.split()
    if len(fields) != 8:
        raise DatasetError(f"{where}: expected 8 fields, found {len(fields)}")
    try:
        frame_id = int(fields[0])
        values = np.array([float(field) for field in fields[1:]])
    except ValueError as e:
        raise DatasetError(f"{where}: {e}") from e
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"{where}: non-finite pose value")
    quat = values[3:]
    if abs(np.linalg.norm(quat) - 1.0) > QUATERNION_TOLERANCE:
        raise DatasetError(f"{where}: quaternion norm {np.linalg.norm(quat):.9f} is not 1")
    pose = np.eye(4)
    pose[:3, :3] = Rotation.from_quat(quat).as_matrix()
    pose[:3, 3] = values[:3]
    return frame_id, pose


def intrinsics_to_line(camera):
    return f"{camera.fx:.17g} {camera.fy:.17g} {camera.cx:.17g} {camera.cy:.17g} {camera.width} {camera.height}"


def line_to_intrinsics(line, source="intrinsics.txt"):
    """
    Parse ``fx fy cx cy width height``.

    Returns:
        tuple: (fx, fy, cx, cy, width, height).
    """
    fields = line.split()
    if len(fields) != 6:
        raise DatasetError(f"{source}: expected 6 fields, found {len(fields)}")
    try:
        fx, fy, cx, cy = (float(field) for field in fields[:4])
        width, height = int(fields[4]), int(fields[5])
    except ValueError as e:
        raise DatasetError(f"{source}: {e}") from e
    if fx <= 0 or fy <= 0 or width < 1 or height < 1:
        raise DatasetError(f"{source}: invalid intrinsics {line.strip()!r}")
    return fx, fy, cx, cy, width, height


def write_points_ply(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vertex = np.empty(len(points), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    vertex["x"], vertex["y"], vertex["z"] = points[:, 0], points[:, 1], points[:, 2]
    PlyData([PlyElement.describe(vertex, "vertex")], byte_order="<").write(path)


def read_points_ply(path):
    try:
        vertex = PlyData.read(path)["vertex"]
        return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=-1).astype(np.float64)
    except (OSError, KeyError, ValueError, PlyParseError) as e:
        raise DatasetError(f"{path}: unreadable LiDAR scan ({e})") from e


def _read_lines(path):
    with open(path) as f:
        return [(number, line) for number, line in enumerate(f, start=1) if line.strip() and not line.startswith("#")]


def _write_poses(path, frames):
    with open(path, "w") as f:
        for frame_id, pose in frames:
            f.write(pose_to_line(frame_id, pose) + "\n")


def _read_poses(path):
    source = os.path.basename(path)
    return [line_to_pose(line, source, number) for number, line in _read_lines(path)]


def read_intrinsics(path):
    """(fx, fy, cx, cy, width, height) from a one-line intrinsics file."""
    if not os.path.isfile(path):
        raise DatasetError(f"{path}: intrinsics file is missing")
    lines = _read_lines(path)
    if len(lines) != 1:
        raise DatasetError(f"{path}: expected exactly one line")
    return line_to_intrinsics(lines[0][1], path)


def load_cameras(poses_path, intrinsics_path):
    """Image-less cameras for every line of a poses file, sharing one set of intrinsics."""
    if not os.path.isfile(poses_path):
        raise DatasetError(f"{poses_path}: pose file is missing")
    fx, fy, cx, cy, width, height = read_intrinsics(intrinsics_path)
    cameras = []
    for frame_id, pose in _read_poses(poses_path):
        try:
            cameras.append(CameraFrame(fx, fy, cx, cy, width, height, pose, frame_id=frame_id))
        except ValueError as e:
            raise DatasetError(f"{poses_path}: {e}") from e
    return cameras


class Dataset:
    """Posed camera frames, LiDAR scans and optional ground truth rooted at one directory."""

    def __init__(
            self,
            root,
            cameras,
            scans,
            gt_depths=None,
            gt_normals=None,
            gt_mesh=None,
            extrapolation_poses=None,
            holdout_every=8,
        ):
        self.root = root
        self.cameras = list(cameras)
        self.scans = list(scans)
        self.gt_depths = gt_depths
        self.gt_normals = gt_normals
        self.gt_mesh = gt_mesh
        self.extrapolation_poses = list(extrapolation_poses or [])
        self.holdout_every = holdout_every

    def __len__(self):
        return len(self.cameras)

    def __repr__(self):
        return f"Dataset({self.root!r}, {len(self.cameras)} views, {len(self.scans)} scans)"

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def write(self):
        if not self.cameras:
            raise DatasetError("Refusing to write a dataset without camera frames")
        for sub in ("images", "lidar"):
            os.makedirs(self.path(sub), exist_ok=True)

        with open(self.path("intrinsics.txt"), "w") as f:
            f.write(intrinsics_to_line(self.cameras[0]) + "\n")
        _write_poses(self.path("poses.txt"), [(c.frame_id, c.pose) for c in self.cameras])
        for camera in self.cameras:
            if camera.image is None:
                raise DatasetError(f"Camera frame {camera.frame_id} has no image")
            imageio.save_rgb(self.path("images", FRAME_PATTERN.format(camera.frame_id) + ".png"), camera.image)

        with open(self.path("lidar", "origins.txt"), "w") as f:
            for index, scan in enumerate(self.scans):
                write_points_ply(self.path("lidar", FRAME_PATTERN.format(index) + ".ply"), scan.endpoints())
                f.write(" ".join(f"{value:.17g}" for value in scan.origin) + "\n")

        if self.gt_depths is not None:
            os.makedirs(self.path("gt", "depth"), exist_ok=True)
            scale = imageio.depth_scale_for(np.stack(self.gt_depths))
            with open(self.path("gt", "depth_scale.txt"), "w") as f:
                f.write(f"{scale:.17g}\n")
            for camera, depth in zip(self.cameras, self.gt_depths):
                imageio.save_depth16(self.path("gt", "depth", FRAME_PATTERN.format(camera.frame_id) + ".png"), depth, scale)
        if self.gt_normals is not None:
            os.makedirs(self.path("gt", "normal"), exist_ok=True)
            for camera, normal in zip(self.cameras, self.gt_normals):
                imageio.save_normal(self.path("gt", "normal", FRAME_PATTERN.format(camera.frame_id) + ".png"), normal)
        if self.gt_mesh is not None and len(self.gt_mesh.triangles):
            os.makedirs(self.path("gt"), exist_ok=True)
            self.gt_mesh.export(self.path("gt", "gt_mesh.ply"))
        if self.extrapolation_poses:
            _write_poses(self.path("extrapolation_poses.txt"), enumerate(self.extrapolation_poses))
        logger.info(f"Wrote {self!r}")

    @classmethod
    def load(cls, root, holdout_every=8):
        """
        Read a dataset directory.

        Args:
            root (str): Dataset directory.
            holdout_every (int): Every n-th view is held out for evaluation (0 disables).

        Returns:
            Dataset: The loaded dataset. Any malformed file raises DatasetError naming it.
        """
        if not os.path.isdir(root):
            raise DatasetError(f"Dataset directory {root} does not exist")
        for required in ("intrinsics.txt", "poses.txt"):
            if not os.path.isfile(os.path.join(root, required)):
                raise DatasetError(f"Dataset {root} is missing {required}")

        fx, fy, cx, cy, width, height = read_intrinsics(os.path.join(root, "intrinsics.txt"))

        cameras = []
        for frame_id, pose in _read_poses(os.path.join(root, "poses.txt")):
            image_path = os.path.join(root, "images", FRAME_PATTERN.format(frame_id) + ".png")
            if not os.path.isfile(image_path):
                raise DatasetError(f"{image_path}: image for frame {frame_id} is missing")
            image = imageio.load_rgb(image_path)
            if image.shape[:2] != (height, width):
                raise DatasetError(f"{image_path}: size {image.shape[1]}x{image.shape[0]} does not match intrinsics")
            try:
                cameras.append(CameraFrame(fx, fy, cx, cy, width, height, pose, image, frame_id))
            except ValueError as e:
                raise DatasetError(f"{os.path.join(root, 'poses.txt')}: {e}") from e

        scans = []
        origins_path = os.path.join(root, "lidar", "origins.txt")
        scan_paths = sorted(glob.glob(os.path.join(root, "lidar", "*.ply")))
        if scan_paths:
            if not os.path.isfile(origins_path):
                raise DatasetError(f"{origins_path}: missing sensor origins for {len(scan_paths)} scans")
            origins = []
            for number, line in _read_lines(origins_path):
                try:
                    origins.append(np.array([float(value) for value in line.split()]).reshape(3))
                except ValueError as e:
                    raise DatasetError(f"{origins_path}:{number}: {e}") from e
            if len(origins) != len(scan_paths):
                raise DatasetError(f"{origins_path}: {len(origins)} origins for {len(scan_paths)} scans")
            for origin, scan_path in zip(origins, scan_paths):
                scans.append(LidarScan.from_endpoints(origin, read_points_ply(scan_path)))

        gt_depths = gt_normals = gt_mesh = None
        scale_path = os.path.join(root, "gt", "depth_scale.txt")
        if os.path.isfile(scale_path):
            scale = float(_read_lines(scale_path)[0][1])
            gt_depths = [
                imageio.load_depth16(os.path.join(root, "gt", "depth", FRAME_PATTERN.format(c.frame_id) + ".png"), scale)
                for c in cameras
            ]
        if os.path.isdir(os.path.join(root, "gt", "normal")):
            gt_normals = [
                imageio.load_normal(os.path.join(root, "gt", "normal", FRAME_PATTERN.format(c.frame_id) + ".png"))
                for c in cameras
            ]
        mesh_path = os.path.join(root, "gt", "gt_mesh.ply")
        if os.path.isfile(mesh_path):
            gt_mesh = TriangleMesh.load(mesh_path)

        extrapolation_poses = []
        extrapolation_path = os.path.join(root, "extrapolation_poses.txt")
        if os.path.isfile(extrapolation_path):
            extrapolation_poses = [pose for _, pose in _read_poses(extrapolation_path)]

        dataset = cls(root, cameras, scans, gt_depths, gt_normals, gt_mesh, extrapolation_poses, holdout_every)
        logger.info(f"Loaded {dataset!r}")
        return dataset

    def split(self):
        """(train, test) camera lists; every ``holdout_every``-th view is held out."""
        if self.holdout_every <= 0 or len(self.cameras) < 2:
            return list(self.cameras), []
        train, test = [], []
        for index, camera in enumerate(self.cameras):
            (test if index % self.holdout_every == 0 else train).append(camera)
        return train, test

    def gt_depth(self, camera):
        if self.gt_depths is None:
            return None
        for index, candidate in enumerate(self.cameras):
            if candidate.frame_id == camera.frame_id:
                return self.gt_depths[index]
        return None

    def bounds(self, margin=0.1):
        """Axis-aligned box around all LiDAR endpoints and sensor origins, padded by ``margin`` of its extent."""
        points = [scan.endpoints() for scan in self.scans] + [scan.origin[None] for scan in self.scans]
        points = np.concatenate(points) if points else np.zeros((0, 3))
        if len(points) < 2:
            raise DatasetError(f"Dataset {self.root} has no LiDAR returns to bound the scene")
        lo, hi = points.min(axis=0), points.max(axis=0)
        pad = margin * float(np.max(hi - lo))
        return lo - pad, hi + pad
