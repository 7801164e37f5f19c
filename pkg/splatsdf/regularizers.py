"""Geometric regularization: rendered-normal consistency and SDF-aided shape alignment."""
import logging
from collections import Counter

import torch
from torch.func import functional_call

from splatsdf.splat_scene import disk_point, kernel

logger = logging.getLogger(__name__)

# Counts of degenerate evaluations, keyed by term name
WARNINGS = Counter()

DISK_SAMPLE_CLAMP = 3.0
NORMAL_EPS = 1e-6


def normal_from_depth(depth, camera, alpha=None, alpha_threshold=0.5):
    """Finite-difference normals of a depth image, in world frame.

    Every pixel is back-projected to a camera-frame point; central differences along x and
    y are crossed so the normal faces the camera. Border pixels, pixels whose alpha (or any
    4-neighbor's alpha) is under ``alpha_threshold`` and degenerate crosses are masked.

    Returns
    -------
    normals : torch.Tensor
        (H, W, 3) unit normals, zero where masked.
    valid : torch.Tensor
        (H, W) boolean mask.
    """
    dtype = depth.dtype
    height, width = depth.shape
    rays = torch.as_tensor(camera.pixel_directions(), dtype=dtype)
    points = depth.unsqueeze(-1) * rays

    valid = torch.zeros((height, width), dtype=torch.bool)
    normals = torch.zeros((height, width, 3), dtype=dtype)
    if height < 3 or width < 3:
        return normals, valid

    dx = (points[1:-1, 2:] - points[1:-1, :-2]) / 2.0
    dy = (points[2:, 1:-1] - points[:-2, 1:-1]) / 2.0
    cross = torch.cross(dy, dx, dim=-1)
    length = cross.norm(dim=-1)
    interior = length > 1e-12
    if alpha is not None:
        covered = alpha.detach() >= alpha_threshold
        interior = (
            interior
            & covered[1:-1, 1:-1]
            & covered[1:-1, 2:] & covered[1:-1, :-2]
            & covered[2:, 1:-1] & covered[:-2, 1:-1]
        )
    cam_normals = cross / length.clamp(min=1e-12).unsqueeze(-1)
    rotation = torch.as_tensor(camera.rotation, dtype=dtype)
    world = cam_normals @ rotation.T
    normals = torch.nn.functional.pad(
        torch.where(interior.unsqueeze(-1), world, torch.zeros_like(world)).permute(2, 0, 1),
        (1, 1, 1, 1),
    ).permute(1, 2, 0)
    valid[1:-1, 1:-1] = interior
    return normals, valid


def loss_render_consistency(out, camera, alpha_threshold=0.5):
    """Mean ``1 - N . N_hat`` over pixels with a valid depth normal and ``|N| > 1e-6``.

    ``N`` is the rendered normal renormalized per pixel and ``N_hat`` the finite-difference
    normal of the rendered depth. Returns 0 and counts a warning when no pixel is valid.
    """
    depth_normals, valid = normal_from_depth(out.depth, camera, out.alpha, alpha_threshold)
    norm = out.normal.norm(dim=-1)
    valid = valid & (norm.detach() > NORMAL_EPS)
    if not valid.any():
        WARNINGS["render_consistency"] += 1
        logger.warning("Render consistency loss has no valid pixel; returning 0")
        return torch.zeros((), dtype=out.depth.dtype)
    rendered = out.normal / norm.clamp(min=NORMAL_EPS).unsqueeze(-1)
    terms = 1.0 - (rendered * depth_normals).sum(-1)
    return terms[valid].mean()


def sample_disk_point(splat, generator=None, clamp=DISK_SAMPLE_CLAMP):
    """One standard-normal disk sample per splat, clamped to ``|u|, |v| <= clamp``.

    Returns ``(u, v, p)`` where ``p = disk_point(splat, u, v)``.
    """
    count = len(splat)
    dtype = splat.means.dtype
    uv = torch.randn((count, 2), generator=generator, dtype=dtype).clamp(-clamp, clamp)
    u, v = uv[:, 0], uv[:, 1]
    return u, v, disk_point(splat, u, v)


def _field_values(field, points, to_field):
    if to_field:
        return field(points)[0]
    frozen = {name: p.detach() for name, p in field.named_parameters()}
    return functional_call(field, frozen, (points,))[0]


def loss_shape(scene, field, view_weights, generator=None, to_field=True, uv=None):
    """``sum_i 1/2 W_i G(u_i, v_i) f(p_i)^2`` over one disk sample per non-sky splat.

    ``W_i`` and the kernel weight are constants. Gradients reach the splat structure through
    ``p_i`` and, when ``to_field`` is set, the field parameters through ``f``. ``uv`` pins
    the disk coordinates instead of sampling.
    """
    disks = scene.disks() if hasattr(scene, "disks") else scene
    if uv is None:
        u, v, points = sample_disk_point(disks, generator)
    else:
        u = torch.as_tensor(uv[0], dtype=disks.means.dtype).expand(len(disks))
        v = torch.as_tensor(uv[1], dtype=disks.means.dtype).expand(len(disks))
        points = disk_point(disks, u, v)
    weights = torch.as_tensor(view_weights, dtype=disks.means.dtype).detach()
    active = ~disks.is_sky & (weights > 0)
    if not active.any():
        return torch.zeros((), dtype=disks.means.dtype)
    response = kernel(u, v).detach()[active]
    values = _field_values(field, points[active], to_field)
    return (0.5 * weights[active] * response * values * values).sum()


def loss_center(scene, field, view_weights, to_field=True):
    """Center-only variant of ``loss_shape``: ``sum_i 1/2 W_i f(p_i)^2`` with ``G = 1``."""
    disks = scene.disks() if hasattr(scene, "disks") else scene
    weights = torch.as_tensor(view_weights, dtype=disks.means.dtype).detach()
    active = ~disks.is_sky & (weights > 0)
    if not active.any():
        return torch.zeros((), dtype=disks.means.dtype)
    values = _field_values(field, disks.means[active], to_field)
    return (0.5 * weights[active] * values * values).sum()


@torch.no_grad()
def zero_set_residual(scene, field, generator=None):
    """Mean ``|f(p_s)|`` over one disk sample per non-sky splat."""
    disks = scene.disks()
    keep = ~disks.is_sky
    if not keep.any():
        return 0.0
    _, _, points = sample_disk_point(disks, generator)
    return float(field(points[keep])[0].abs().mean())
