"""Differentiable ray-disk rasterizer.

Every pixel casts one ray through its center, intersects it exactly with the planes of
the 2D Gaussian disks binned to its 16x16 tile, sorts the hits front to back and alpha
composites color, camera-z depth, camera-facing normal and opacity. The backward pass is
hand derived and recomputes each tile's blend instead of storing it.

Cameras follow the OpenCV convention (x right, y down, z forward); ``pose`` is the
world-from-camera transform and pixel ``(i, j)`` is sampled at ``(i + 0.5, j + 0.5)``.
"""
import math
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.autograd.function import once_differentiable

from splatsdf.errors import NonFiniteError
from splatsdf.splat_scene import kernel, sh_color

logger = logging.getLogger(__name__)

TILE_SIZE = 16
# |ray . n| below this is treated as parallel to the disk plane
PARALLEL_EPS = 1e-9
# Kernel responses under 1/255 are misses
KERNEL_CUTOFF = 1.0 / 255.0
KERNEL_EXTENT = math.sqrt(2.0 * math.log(255.0))
# Compositing stops once transmittance falls below this
TRANSMITTANCE_MIN = 1e-4
ALPHA_DEPTH_EPS = 1e-6
NEAR_PLANE = 1e-6
# Output channels: color (3), depth sum (1), normal (3), alpha (1)
CHANNELS = 8


@dataclass
class CameraFrame:
    """Pinhole camera with an optional ground-truth image (H, W, 3) in [0, 1]."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray
    image: Optional[np.ndarray] = None
    frame_id: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Camera {self.frame_id}: focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"Camera {self.frame_id}: empty image size {self.width}x{self.height}")
        if self.pose.shape != (4, 4):
            raise ValueError(f"Camera {self.frame_id}: pose must be 4x4, got {self.pose.shape}")
        rotation = self.pose[:3, :3]
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-6) or np.linalg.det(rotation) < 0:
            raise ValueError(f"Camera {self.frame_id}: pose rotation is not orthonormal")

    @property
    def rotation(self):
        return self.pose[:3, :3]

    @property
    def center(self):
        return self.pose[:3, 3]

    @property
    def view_axis(self):
        """World direction of the camera's +z axis."""
        return self.pose[:3, 2]

    def pixel_directions(self):
        """Unnormalized camera-frame ray directions (H, W, 3) with z = 1."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        grid_x, grid_y = np.meshgrid(xs, ys)
        return np.stack([grid_x, grid_y, np.ones_like(grid_x)], axis=-1)

    def rays(self):
        """World ray origin (3,), unit directions (H, W, 3) and ``d . z_cam`` (H, W)."""
        cam_dirs = self.pixel_directions()
        lengths = np.linalg.norm(cam_dirs, axis=-1)
        dirs = (cam_dirs / lengths[..., None]) @ self.rotation.T
        return self.center.copy(), dirs, 1.0 / lengths

    def project(self, points):
        """Pixel coordinates (N, 2) and camera z (N,) of world points."""
        cam = (np.asarray(points) - self.center) @ self.rotation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * cam[:, 0] / z + self.cx
            y = self.fy * cam[:, 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def with_image(self, image):
        return CameraFrame(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.pose, image, self.frame_id)


@dataclass
class RenderOutput:
    """Rendered images (H, W, ...) and per-splat statistics for one view."""
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    alpha: torch.Tensor
    depth_sum: torch.Tensor
    splat_weights: torch.Tensor
    max_response: torch.Tensor

    @property
    def shape(self):
        return tuple(self.alpha.shape)


@dataclass
class Intersection:
    u: torch.Tensor
    v: torch.Tensor
    t: torch.Tensor
    depth: torch.Tensor
    hit: torch.Tensor


def intersect(splat, origin, direction, view_axis=None):
    """Exact intersection of one ray with the planes of all disks in ``splat``.

    Returns disk coordinates ``(u, v)`` such that ``disk_point(u, v)`` is the hit point,
    the ray parameter ``t`` and the camera-z ``depth`` (``t`` when no ``view_axis`` is
    given). ``hit`` is False when the ray is parallel to the plane, the plane lies behind
    the origin or the kernel response is under 1/255.
    """
    dtype = splat.means.dtype
    origin = torch.as_tensor(origin, dtype=dtype)
    direction = torch.as_tensor(direction, dtype=dtype)
    axis_u, axis_v, normals = splat.axes()
    m = torch.cross(axis_u, axis_v, dim=-1)
    facing = normals @ direction
    denom = m @ direction
    hit = facing.abs() >= PARALLEL_EPS
    t = ((splat.means - origin) * m).sum(-1) / torch.where(hit, denom, torch.ones_like(denom))
    hit = hit & (t > 0)
    r = origin + t.unsqueeze(-1) * direction - splat.means
    u = (r * axis_u).sum(-1) / (axis_u * axis_u).sum(-1)
    v = (r * axis_v).sum(-1) / (axis_v * axis_v).sum(-1)
    hit = hit & (kernel(u, v) >= KERNEL_CUTOFF)
    if view_axis is None:
        depth = t
    else:
        depth = t * (direction @ torch.as_tensor(view_axis, dtype=dtype))
    return Intersection(u, v, t, depth, hit)


class _RasterContext:
    """Per-camera constants shared by the forward and backward passes."""

    def __init__(self, camera, dtype, tile_size=TILE_SIZE):
        origin, dirs, view_cos = camera.rays()
        self.camera = camera
        self.tile_size = tile_size
        self.origin = torch.as_tensor(origin, dtype=dtype)
        self.dirs = torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype)
        self.view_cos = torch.as_tensor(view_cos.reshape(-1), dtype=dtype)
        self.tiles_x = (camera.width + tile_size - 1) // tile_size
        self.tiles_y = (camera.height + tile_size - 1) // tile_size
        pixel_ids = torch.arange(camera.width * camera.height).reshape(camera.height, camera.width)
        self.tile_pixels = [
            pixel_ids[ty * tile_size:(ty + 1) * tile_size, tx * tile_size:(tx + 1) * tile_size].reshape(-1)
            for ty in range(self.tiles_y)
            for tx in range(self.tiles_x)
        ]

    @property
    def pixel_count(self):
        return self.dirs.shape[0]

    def bin_splats(self, means, axis_u, axis_v):
        """Splat ids overlapping each tile, from the projected kernel-cutoff parallelogram."""
        camera = self.camera
        signs = torch.tensor([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]], dtype=means.dtype)
        corners = (
            means.unsqueeze(1)
            + KERNEL_EXTENT * signs[:, 0:1] * axis_u.unsqueeze(1)
            + KERNEL_EXTENT * signs[:, 1:2] * axis_v.unsqueeze(1)
        )
        rotation = torch.as_tensor(camera.rotation, dtype=means.dtype)
        cam = (corners - self.origin) @ rotation
        z = cam[..., 2]
        behind = z <= NEAR_PLANE
        culled = behind.all(dim=1)
        straddles = behind.any(dim=1)
        safe_z = torch.where(behind, torch.ones_like(z), z)
        px = camera.fx * cam[..., 0] / safe_z + camera.cx
        py = camera.fy * cam[..., 1] / safe_z + camera.cy
        ts = self.tile_size
        x0 = torch.floor(px.min(dim=1).values / ts)
        x1 = torch.floor(px.max(dim=1).values / ts)
        y0 = torch.floor(py.min(dim=1).values / ts)
        y1 = torch.floor(py.max(dim=1).values / ts)
        x0 = torch.where(straddles, torch.zeros_like(x0), x0)
        y0 = torch.where(straddles, torch.zeros_like(y0), y0)
        x1 = torch.where(straddles, torch.full_like(x1, self.tiles_x - 1), x1)
        y1 = torch.where(straddles, torch.full_like(y1, self.tiles_y - 1), y1)
        bins = []
        for tile, pixels in enumerate(self.tile_pixels):
            ty, tx = divmod(tile, self.tiles_x)
            overlap = ~culled & (x0 <= tx) & (x1 >= tx) & (y0 <= ty) & (y1 >= ty)
            ids = torch.nonzero(overlap).squeeze(-1)
            if len(ids):
                bins.append((pixels, ids))
        return bins


class _TileBlend:
    """Front-to-back blend of the splats binned to one tile, in depth-sorted layout (P, K)."""

    def __init__(self, raster, pixels, ids, means, axis_u, axis_v, normals, opacities, colors):
        dirs = raster.dirs[pixels]
        view_cos = raster.view_cos[pixels]
        origin = raster.origin
        p, a, b, n = means[ids], axis_u[ids], axis_v[ids], normals[ids]
        m = torch.cross(a, b, dim=-1)

        facing = dirs @ n.T
        denom = dirs @ m.T
        hit = facing.abs() >= PARALLEL_EPS
        denom = torch.where(hit, denom, torch.ones_like(denom))
        t = ((p - origin) * m).sum(-1) / denom
        hit = hit & (t > 0)
        r = origin + t.unsqueeze(-1) * dirs.unsqueeze(1) - p
        aa = (a * a).sum(-1)
        bb = (b * b).sum(-1)
        u = (r * a).sum(-1) / aa
        v = (r * b).sum(-1) / bb
        G = torch.exp(-(u * u + v * v) / 2.0)
        hit = hit & (G >= KERNEL_CUTOFF)
        depth = t * view_cos.unsqueeze(1)

        key = torch.where(hit, depth, torch.full_like(depth, math.inf))
        order = torch.argsort(key, dim=1, stable=True)
        take = lambda x: torch.gather(x, 1, order)
        take3 = lambda x: torch.gather(x, 1, order.unsqueeze(-1).expand(-1, -1, 3))

        self.pixels = pixels
        self.ids = ids
        self.order = order
        self.dirs = dirs
        self.view_cos = view_cos
        self.hit = take(hit)
        self.t = take(t)
        self.u = take(u)
        self.v = take(v)
        self.G = take(G)
        self.denom = take(denom)
        self.depth = take(depth)
        self.r = take3(r)
        self.a_local = a
        self.b_local = b
        self.a = a[order]
        self.b = b[order]
        self.m = m[order]
        self.aa = aa[order]
        self.bb = bb[order]
        self.opacity = opacities[ids][order]
        normal = n[order]
        facing_sorted = (normal * dirs.unsqueeze(1)).sum(-1)
        self.sign = torch.where(facing_sorted > 0, -torch.ones_like(facing_sorted), torch.ones_like(facing_sorted))
        self.ahat = torch.where(self.hit, self.opacity * self.G, torch.zeros_like(self.G))
        cum = torch.cumprod(1.0 - self.ahat, dim=1)
        self.T = torch.cat([torch.ones_like(cum[:, :1]), cum[:, :-1]], dim=1)
        self.included = self.hit & (self.T >= TRANSMITTANCE_MIN)
        self.w = torch.where(self.included, self.ahat * self.T, torch.zeros_like(self.T))
        self.features = torch.cat([
            colors[ids][order],
            self.depth.unsqueeze(-1),
            self.sign.unsqueeze(-1) * normal,
            torch.ones_like(self.depth).unsqueeze(-1),
        ], dim=-1)
        self.out = (self.w.unsqueeze(-1) * self.features).sum(dim=1)

    def scatter(self, values, count):
        """Sum a sorted (P, K, C) or (P, K) quantity into per-local-splat rows (K, C)."""
        flat = values.reshape(-1, *values.shape[2:])
        out = values.new_zeros((count,) + tuple(values.shape[2:]))
        return out.index_add_(0, self.order.reshape(-1), flat)

    def backward(self, grad_out):
        """Local gradients (K rows) for means, axis_u, axis_v, normals, opacities, colors."""
        K = len(self.ids)
        g = grad_out.unsqueeze(1)
        wf = self.w.unsqueeze(-1) * self.features
        suffix = torch.flip(torch.cumsum(torch.flip(wf, [1]), dim=1), [1]) - wf
        t_next = self.T * (1.0 - self.ahat)
        # Later splats only contribute while t_next >= TRANSMITTANCE_MIN, so the clamp never
        # changes a non-zero suffix
        tail = suffix / t_next.clamp(min=TRANSMITTANCE_MIN).unsqueeze(-1)
        d_ahat = torch.where(self.included, self.T * ((self.features - tail) * g).sum(-1), torch.zeros_like(self.T))
        d_features = self.w.unsqueeze(-1) * g

        d_opacity = d_ahat * self.G
        dG = d_ahat * self.opacity
        du = -dG * self.G * self.u
        dv = -dG * self.G * self.v
        d_depth = d_features[..., 3]

        aa = self.aa.unsqueeze(-1)
        bb = self.bb.unsqueeze(-1)
        dr = du.unsqueeze(-1) * self.a / aa + dv.unsqueeze(-1) * self.b / bb
        dt = d_depth * self.view_cos.unsqueeze(1) + (dr * self.dirs.unsqueeze(1)).sum(-1)
        denom = self.denom.unsqueeze(-1)
        dp = -dr + dt.unsqueeze(-1) * self.m / denom
        dm = -dt.unsqueeze(-1) * self.r / denom
        da = du.unsqueeze(-1) * (self.r - 2.0 * self.u.unsqueeze(-1) * self.a) / aa
        db = dv.unsqueeze(-1) * (self.r - 2.0 * self.v.unsqueeze(-1) * self.b) / bb
        dn = self.sign.unsqueeze(-1) * d_features[..., 4:7]

        dm_local = self.scatter(dm, K)
        da_local = self.scatter(da, K) + torch.cross(self.b_local, dm_local, dim=-1)
        db_local = self.scatter(db, K) + torch.cross(dm_local, self.a_local, dim=-1)
        return (
            self.scatter(dp, K),
            da_local,
            db_local,
            self.scatter(dn, K),
            self.scatter(d_opacity, K),
            self.scatter(d_features[..., 0:3], K),
        )


class _RasterizeDisks(torch.autograd.Function):

    @staticmethod
    def forward(ctx, means, axis_u, axis_v, normals, opacities, colors, raster):
        count = means.shape[0]
        image = means.new_zeros((raster.pixel_count, CHANNELS))
        weights = means.new_zeros(count)
        max_response = means.new_zeros(count)
        bins = raster.bin_splats(means, axis_u, axis_v)
        for pixels, ids in bins:
            blend = _TileBlend(raster, pixels, ids, means, axis_u, axis_v, normals, opacities, colors)
            image[pixels] = blend.out
            weights.index_add_(0, ids, blend.scatter(blend.w, len(ids)))
            response = torch.where(blend.hit, blend.G, torch.zeros_like(blend.G))
            local_max = response.new_zeros(len(ids)).scatter_reduce_(
                0, blend.order.reshape(-1), response.reshape(-1), reduce="amax"
            )
            max_response[ids] = torch.maximum(max_response[ids], local_max)
        ctx.save_for_backward(means, axis_u, axis_v, normals, opacities, colors)
        ctx.raster = raster
        ctx.bins = bins
        ctx.mark_non_differentiable(weights, max_response)
        height, width = raster.camera.height, raster.camera.width
        return image.reshape(height, width, CHANNELS), weights, max_response

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_image, grad_weights, grad_max_response):
        if not torch.isfinite(grad_image).all():
            raise NonFiniteError("Non-finite adjoint reaching the rasterizer", where="rasterizer")
        means, axis_u, axis_v, normals, opacities, colors = ctx.saved_tensors
        raster = ctx.raster
        grads = [torch.zeros_like(x) for x in (means, axis_u, axis_v, normals, opacities, colors)]
        grad_image = grad_image.reshape(-1, CHANNELS)
        for pixels, ids in ctx.bins:
            blend = _TileBlend(raster, pixels, ids, means, axis_u, axis_v, normals, opacities, colors)
            for total, local in zip(grads, blend.backward(grad_image[pixels])):
                total.index_add_(0, ids, local)
        return (*grads, None)


def _empty_output(camera, count, dtype):
    zeros = lambda *shape: torch.zeros(shape, dtype=dtype)
    h, w = camera.height, camera.width
    return RenderOutput(
        color=zeros(h, w, 3), depth=zeros(h, w), normal=zeros(h, w, 3), alpha=zeros(h, w),
        depth_sum=zeros(h, w), splat_weights=zeros(count), max_response=zeros(count),
    )


def splat_colors(splat, camera):
    """View-dependent color of every splat seen from the camera center."""
    center = torch.as_tensor(camera.center, dtype=splat.means.dtype)
    view_dirs = splat.means - center
    view_dirs = view_dirs / view_dirs.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    return sh_color(splat, view_dirs)


def render(scene, camera, background=None, tile_size=TILE_SIZE):
    """Render color, depth, normal and alpha images of ``scene`` seen by ``camera``.

    ``scene`` may be a SplatScene or an already activated SplatDisk. Depth is the alpha-
    normalized mean camera-z and is 0 where nothing was hit. Normals are world-frame and
    unnormalized (their length is the alpha of the contributing splats). ``background`` is
    an optional RGB composited behind the splats; black by default.
    """
    disks = scene.disks() if hasattr(scene, "disks") else scene
    dtype = disks.means.dtype
    if len(disks) == 0:
        out = _empty_output(camera, 0, dtype)
    else:
        raster = _RasterContext(camera, dtype, tile_size)
        axis_u, axis_v, normals = disks.axes()
        colors = splat_colors(disks, camera)
        image, weights, max_response = _RasterizeDisks.apply(
            disks.means, axis_u, axis_v, normals, disks.opacities, colors, raster
        )
        alpha = image[..., 7]
        depth_sum = image[..., 3]
        out = RenderOutput(
            color=image[..., 0:3],
            depth=depth_sum / alpha.clamp(min=ALPHA_DEPTH_EPS),
            normal=image[..., 4:7],
            alpha=alpha,
            depth_sum=depth_sum,
            splat_weights=weights,
            max_response=max_response,
        )
    if background is not None:
        bg = torch.as_tensor(background, dtype=dtype)
        out.color = out.color + (1.0 - out.alpha).unsqueeze(-1) * bg
    return out


@torch.no_grad()
def render_reference(scene, camera, background=None):
    """Brute-force per-pixel compositor without tiling, used to check ``render``."""
    disks = scene.disks() if hasattr(scene, "disks") else scene
    dtype = disks.means.dtype
    count = len(disks)
    out = _empty_output(camera, count, dtype)
    if count == 0:
        if background is not None:
            out.color += torch.as_tensor(background, dtype=dtype)
        return out
    origin, dirs, _ = camera.rays()
    _, _, normals = disks.axes()
    colors = splat_colors(disks, camera)
    for j in range(camera.height):
        for i in range(camera.width):
            direction = torch.as_tensor(dirs[j, i], dtype=dtype)
            hits = intersect(disks, origin, direction, camera.view_axis)
            order = [k for k in torch.argsort(hits.depth, stable=True).tolist() if hits.hit[k]]
            transmittance = 1.0
            for k in order:
                if transmittance < TRANSMITTANCE_MIN:
                    break
                response = float(kernel(hits.u[k], hits.v[k]))
                w = float(disks.opacities[k]) * response * transmittance
                normal = normals[k] if float(normals[k] @ direction) <= 0 else -normals[k]
                out.color[j, i] += w * colors[k]
                out.depth_sum[j, i] += w * hits.depth[k]
                out.normal[j, i] += w * normal
                out.alpha[j, i] += w
                out.splat_weights[k] += w
                out.max_response[k] = max(float(out.max_response[k]), response)
                transmittance *= 1.0 - float(disks.opacities[k]) * response
    out.depth = out.depth_sum / out.alpha.clamp(min=ALPHA_DEPTH_EPS)
    if background is not None:
        out.color += (1.0 - out.alpha).unsqueeze(-1) * torch.as_tensor(background, dtype=dtype)
    return out


def render_backward(scene, camera, grad_outputs):
    """Gradients of ``sum <grad_outputs[k], output_k>`` on every scene parameter.

    ``grad_outputs`` maps any of ``color``, ``depth``, ``normal`` and ``alpha`` to an
    adjoint image. The per-splat weights are statistics and receive no gradient.
    """
    for name, grad in grad_outputs.items():
        if not torch.isfinite(torch.as_tensor(grad)).all():
            raise NonFiniteError(f"Non-finite adjoint for rendered {name}", where=name)
    out = render(scene, camera)
    params = scene.param_dict()
    outputs, adjoints = [], []
    for name, grad in grad_outputs.items():
        tensor = getattr(out, name)
        outputs.append(tensor)
        adjoints.append(torch.as_tensor(grad, dtype=tensor.dtype))
    grads = torch.autograd.grad(outputs, list(params.values()), adjoints, allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(params.items(), grads)
    }


def view_space_gradient(means, means_grad, camera):
    """Norm of the positional gradient expressed in normalized screen units per splat."""
    with torch.no_grad():
        rotation = torch.as_tensor(camera.rotation, dtype=means.dtype)
        center = torch.as_tensor(camera.center, dtype=means.dtype)
        cam = (means - center) @ rotation
        grad_cam = means_grad @ rotation
        z = cam[:, 2].clamp(min=NEAR_PLANE)
        gx = grad_cam[:, 0] * z * camera.width / (2.0 * camera.fx)
        gy = grad_cam[:, 1] * z * camera.height / (2.0 * camera.fy)
        grad = torch.sqrt(gx * gx + gy * gy)
        return torch.where(cam[:, 2] > NEAR_PLANE, grad, torch.zeros_like(grad))


def gaussian_window(size=11, sigma=1.5, dtype=None):
    coords = torch.arange(size, dtype=dtype or torch.get_default_dtype()) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_torch(a, b, window_size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Differentiable mean SSIM of two (H, W, C) images in [0, 1], per channel.

    Only windows fully inside the image are averaged; images smaller than the window fall
    back to zero-padded same-size windows.
    """
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    channels = a.shape[-1]
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    window = gaussian_window(window_size, sigma, a.dtype).expand(channels, 1, window_size, window_size)
    padding = 0 if min(a.shape[0], a.shape[1]) >= window_size else window_size // 2
    filt = lambda img: F.conv2d(img, window, padding=padding, groups=channels)
    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2))
    return ssim_map.mean()


def loss_color(out, gt, ssim_weight=0.2):
    """``(1 - w) * L1 + w * (1 - SSIM) / 2`` between the rendered color and ``gt``."""
    color = out.color if isinstance(out, RenderOutput) else out
    gt = torch.as_tensor(gt, dtype=color.dtype)
    if gt.shape != color.shape:
        raise ValueError(f"Rendered image {tuple(color.shape)} does not match ground truth {tuple(gt.shape)}")
    l1 = (color - gt).abs().mean()
    dssim = (1.0 - ssim_torch(color, gt)) / 2.0
    return (1.0 - ssim_weight) * l1 + ssim_weight * dssim
