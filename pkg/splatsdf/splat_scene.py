"""2D Gaussian disk primitives with spherical-harmonic color and adaptive density control."""
import math
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from plyfile import PlyData, PlyElement

from splatsdf.diff_core import reindex_group
from splatsdf.errors import EmptySceneError

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3
# Logit storage cannot represent exactly 0 or 1
OPACITY_CLAMP = 1e-6
SPLIT_SIZE_FACTOR = 1.6
SPLIT_SAMPLES = 2


def sh_coefficient_count(degree):
    return (degree + 1) ** 2


def quat_to_frame(quats):
    """Tangent frame ``(t_u, t_v, n)`` of (N, 4) quaternions stored as (w, x, y, z).

    The quaternion is normalized first, so the frame is right-handed orthonormal for any
    non-zero input.
    """
    q = quats / quats.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    t_u = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], dim=-1)
    t_v = torch.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], dim=-1)
    n = torch.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return t_u, t_v, n


def kernel(u, v):
    """Unnormalized 2D Gaussian ``G(u, v) = exp(-(u^2 + v^2) / 2)``."""
    return torch.exp(-(u * u + v * v) / 2.0)


def eval_sh(degree, sh, dirs):
    """Evaluate real SH of ``degree`` with coefficients (N, K, 3) along unit (N, 3) directions."""
    if degree > MAX_SH_DEGREE:
        raise ValueError(f"SH degree {degree} not supported (max {MAX_SH_DEGREE})")
    result = SH_C0 * sh[:, 0]
    if degree < 1:
        return result
    x, y, z = (dirs[:, i:i + 1] for i in range(3))
    result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (
        result
        + SH_C2[0] * xy * sh[:, 4]
        + SH_C2[1] * yz * sh[:, 5]
        + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
        + SH_C2[3] * xz * sh[:, 7]
        + SH_C2[4] * (xx - yy) * sh[:, 8]
    )
    if degree < 3:
        return result
    return (
        result
        + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
        + SH_C3[1] * xy * z * sh[:, 10]
        + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
        + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
        + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
        + SH_C3[5] * z * (xx - yy) * sh[:, 14]
        + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15]
    )


def rgb_to_sh_dc(rgb):
    """Degree-0 coefficient reproducing ``rgb`` in every direction."""
    return (rgb - 0.5) / SH_C0


@dataclass
class SplatDisk:
    """Activated attributes of N disks.

    ``scales`` holds ``(s_u, s_v)`` in world units and ``opacities`` holds alpha in [0, 1];
    every tensor keeps its autograd history back to the scene parameters.
    """
    means: torch.Tensor
    quats: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    sh: torch.Tensor
    is_sky: torch.Tensor
    sh_degree: int = 2

    def __len__(self):
        return self.means.shape[0]

    def frame(self):
        return quat_to_frame(self.quats)

    def axes(self):
        """Scaled tangent axes ``a = s_u t_u`` and ``b = s_v t_v`` plus the unit normal."""
        t_u, t_v, n = self.frame()
        return self.scales[:, 0:1] * t_u, self.scales[:, 1:2] * t_v, n


def disk_point(splat, u, v):
    """World point ``p + s_u u t_u + s_v v t_v`` of disk-local coordinates ``(u, v)``."""
    t_u, t_v, _ = splat.frame()
    u = torch.as_tensor(u, dtype=splat.means.dtype)
    v = torch.as_tensor(v, dtype=splat.means.dtype)
    if u.dim() == 1:
        u, v = u.unsqueeze(-1), v.unsqueeze(-1)
    return splat.means + splat.scales[:, 0:1] * u * t_u + splat.scales[:, 1:2] * v * t_v


def sh_color(splat, view_dir):
    """RGB seen along unit ``view_dir`` (N, 3): SH expansion + 0.5, clamped at zero."""
    view_dir = torch.as_tensor(view_dir, dtype=splat.sh.dtype)
    if view_dir.dim() == 1:
        view_dir = view_dir.expand(len(splat), 3)
    return torch.clamp_min(eval_sh(splat.sh_degree, splat.sh, view_dir) + 0.5, 0.0)


class SplatSceneStats:
    """Per-splat accumulators for one densification interval."""

    def __init__(self, count, dtype=None):
        dtype = dtype or torch.get_default_dtype()
        self.grad_accum = torch.zeros(count, dtype=dtype)
        self.denom = torch.zeros(count, dtype=dtype)
        self.weight_accum = torch.zeros(count, dtype=dtype)
        self.max_response = torch.zeros(count, dtype=dtype)

    def __len__(self):
        return self.grad_accum.shape[0]

    def add_view(self, view_grad_norm, weights, max_response=None):
        """Fold one rendered view into the accumulators.

        Only splats that received blend weight count toward the gradient mean.
        ``weight_accum`` keeps the current view's ``W_i``.
        """
        visible = weights > 0
        self.grad_accum[visible] += view_grad_norm.detach()[visible]
        self.denom[visible] += 1.0
        self.weight_accum = weights.detach().clone()
        if max_response is not None:
            self.max_response = torch.maximum(self.max_response, max_response.detach())

    def mean_grad(self):
        return self.grad_accum / self.denom.clamp(min=1.0)


@dataclass
class DensifyReport:
    before: int
    cloned: int
    split: int
    pruned: int
    after: int

    def __str__(self):
        return (
            f"{self.before} -> {self.after} splats "
            f"(cloned {self.cloned}, split {self.split}, pruned {self.pruned})"
        )


class SplatScene(nn.Module):
    """Trainable set of 2D Gaussian disks.

    Parameters are stored unconstrained: quaternions (w, x, y, z), log-scales, opacity
    logits and SH coefficients of shape (N, (degree + 1)^2, 3). ``normalize_`` restores
    unit quaternions and the scale range after every optimizer step.
    """

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __init__(self, means, quats, scales, opacities, sh, is_sky=None, sh_degree=2, scale_min=1e-4, scale_max=1.0):
        super().__init__()
        dtype = torch.get_default_dtype()
        means = torch.as_tensor(means, dtype=dtype)
        count = means.shape[0]
        if sh_degree > MAX_SH_DEGREE:
            raise ValueError(f"SH degree {sh_degree} not supported (max {MAX_SH_DEGREE})")
        if scale_min <= 0 or scale_max < scale_min:
            raise ValueError(f"Invalid scale range [{scale_min}, {scale_max}]")
        self.sh_degree = sh_degree
        self.scale_min = float(scale_min)
        self.scale_max = float(scale_max)
        scales = torch.as_tensor(scales, dtype=dtype).clamp(self.scale_min, self.scale_max)
        opacities = torch.as_tensor(opacities, dtype=dtype).clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
        sh = torch.as_tensor(sh, dtype=dtype)
        if sh.shape[1:] != (sh_coefficient_count(sh_degree), 3):
            raise ValueError(f"SH coefficients shaped {tuple(sh.shape)} do not match degree {sh_degree}")
        self.means = nn.Parameter(means.clone())
        self.quats = nn.Parameter(torch.as_tensor(quats, dtype=dtype).clone())
        self.log_scales = nn.Parameter(torch.log(scales))
        self.opacity_logits = nn.Parameter(torch.logit(opacities))
        self.sh = nn.Parameter(sh.clone())
        if is_sky is None:
            is_sky = torch.zeros(count, dtype=torch.bool)
        self.register_buffer("is_sky", torch.as_tensor(is_sky, dtype=torch.bool).clone())
        self.stats = SplatSceneStats(count)
        self.normalize_()

    @classmethod
    def empty(cls, sh_degree=2, scale_min=1e-4, scale_max=1.0):
        k = sh_coefficient_count(sh_degree)
        return cls(
            torch.zeros((0, 3)), torch.zeros((0, 4)), torch.ones((0, 2)) * scale_min,
            torch.zeros(0), torch.zeros((0, k, 3)), sh_degree=sh_degree,
            scale_min=scale_min, scale_max=scale_max,
        )

    def __len__(self):
        return self.means.shape[0]

    def disks(self):
        return SplatDisk(
            means=self.means,
            quats=self.quats,
            scales=torch.exp(self.log_scales),
            opacities=torch.sigmoid(self.opacity_logits),
            sh=self.sh,
            is_sky=self.is_sky,
            sh_degree=self.sh_degree,
        )

    def param_dict(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @torch.no_grad()
    def normalize_(self):
        """Renormalize quaternions and clamp scales into ``[scale_min, scale_max]``."""
        norms = self.quats.norm(dim=-1, keepdim=True)
        degenerate = norms.squeeze(-1) < 1e-12
        self.quats.div_(norms.clamp(min=1e-12))
        if degenerate.any():
            self.quats[degenerate] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=self.quats.dtype)
        self.log_scales.clamp_(math.log(self.scale_min), math.log(self.scale_max))

    def extend(self, other):
        """Append the splats of ``other`` (same SH degree) to this scene."""
        if other.sh_degree != self.sh_degree:
            raise ValueError(f"Cannot merge SH degree {other.sh_degree} into degree {self.sh_degree}")
        # the scale range widens to hold both sets (sky disks are much larger)
        self.scale_min = min(self.scale_min, other.scale_min)
        self.scale_max = max(self.scale_max, other.scale_max)
        index = torch.arange(len(self) + len(other))
        index[len(self):] = -1
        tensors = {
            name: torch.cat([getattr(self, name).detach(), getattr(other, name).detach()])
            for name in self.PARAM_NAMES
        }
        self._replace(tensors, torch.cat([self.is_sky, other.is_sky]), index)

    def _replace(self, tensors, is_sky, index, optimizer=None):
        for name in self.PARAM_NAMES:
            new_param = nn.Parameter(tensors[name].contiguous())
            if optimizer is not None:
                reindex_group(optimizer, name, new_param, index)
            setattr(self, name, new_param)
        self.is_sky = is_sky
        self.stats = SplatSceneStats(len(self))

    def state(self):
        """Plain-tensor snapshot used by checkpoints."""
        return {
            "sh_degree": self.sh_degree,
            "scale_min": self.scale_min,
            "scale_max": self.scale_max,
            "is_sky": self.is_sky.clone(),
            **{name: getattr(self, name).detach().clone() for name in self.PARAM_NAMES},
        }

    @classmethod
    def from_state(cls, state):
        scene = cls.empty(state["sh_degree"], state["scale_min"], state["scale_max"])
        tensors = {name: state[name].to(torch.get_default_dtype()) for name in cls.PARAM_NAMES}
        scene._replace(tensors, state["is_sky"].bool(), torch.arange(len(tensors["means"])))
        return scene

    def export_ply(self, path):
        """Write positions, normals and raw attributes as named PLY vertex properties."""
        with torch.no_grad():
            means = self.means.double().numpy()
            _, _, n = quat_to_frame(self.quats)
            normals = n.double().numpy()
            sh = self.sh.double().numpy()
            columns = [("x", means[:, 0]), ("y", means[:, 1]), ("z", means[:, 2])]
            columns += [(axis, normals[:, i]) for i, axis in enumerate(("nx", "ny", "nz"))]
            columns += [
                (f"sh_{k}_{c}", sh[:, k, c]) for k in range(sh.shape[1]) for c in range(3)
            ]
            columns += [("opacity", self.opacity_logits.double().numpy())]
            log_scales = self.log_scales.double().numpy()
            columns += [("scale_u", log_scales[:, 0]), ("scale_v", log_scales[:, 1])]
            quats = self.quats.double().numpy()
            columns += [(f"rot_{i}", quats[:, i]) for i in range(4)]
        elements = np.empty(len(self), dtype=[(name, "f4") for name, _ in columns] + [("is_sky", "u1")])
        for name, values in columns:
            elements[name] = values
        elements["is_sky"] = self.is_sky.numpy().astype(np.uint8)
        PlyData([PlyElement.describe(elements, "vertex")]).write(path)
        logger.info(f"Wrote {len(self)} splats to {path}")


def densify_and_prune(scene, grad_threshold, opacity_floor, scale_split, generator=None, optimizer=None):
    """Adaptive density control over the accumulated ``scene.stats``.

    Splats whose mean view-space positional gradient exceeds ``grad_threshold`` are cloned
    when their larger scale is at most ``scale_split`` and otherwise split into two samples
    drawn in their disk plane with scales divided by 1.6. Afterwards every splat with
    opacity below ``opacity_floor`` is removed. Sky splats are never cloned, split or
    pruned. Adam moments follow surviving rows and start at zero for new ones.

    Returns
    -------
    DensifyReport
        Counts of cloned, split and pruned splats.
    """
    before = len(scene)
    stats = scene.stats
    if len(stats) != before:
        raise ValueError(f"Stats cover {len(stats)} splats, scene has {before}")
    with torch.no_grad():
        sky = scene.is_sky
        scales = torch.exp(scene.log_scales)
        selected = (stats.mean_grad() > grad_threshold) & ~sky
        large = scales.max(dim=-1).values > scale_split
        clone = selected & ~large
        split = selected & large

        clone_idx = torch.nonzero(clone).squeeze(-1)
        split_idx = torch.nonzero(split).squeeze(-1)
        keep_idx = torch.nonzero(~split).squeeze(-1)

        params = {name: getattr(scene, name).detach() for name in SplatScene.PARAM_NAMES}
        split_rows = split_idx.repeat(SPLIT_SAMPLES)
        t_u, t_v, _ = quat_to_frame(params["quats"][split_rows])
        split_scales = scales[split_rows]
        offsets = torch.randn((len(split_rows), 2), generator=generator, dtype=split_scales.dtype) * split_scales
        split_means = params["means"][split_rows] + offsets[:, 0:1] * t_u + offsets[:, 1:2] * t_v

        source = torch.cat([keep_idx, clone_idx, split_rows])
        tensors = {name: value[source].clone() for name, value in params.items()}
        n_keep, n_clone = len(keep_idx), len(clone_idx)
        tensors["means"][n_keep + n_clone:] = split_means
        tensors["log_scales"][n_keep + n_clone:] -= math.log(SPLIT_SIZE_FACTOR)
        is_sky = sky[source].clone()

        alive = (torch.sigmoid(tensors["opacity_logits"]) >= opacity_floor) | is_sky
        if not alive.any():
            raise EmptySceneError("Densify/prune would remove every splat")
        pruned = int((~alive).sum())

        index = source.clone()
        index[n_keep:] = -1
        tensors = {name: value[alive] for name, value in tensors.items()}
        scene._replace(tensors, is_sky[alive], index[alive], optimizer=optimizer)
        scene.normalize_()

    report = DensifyReport(before, n_clone, len(split_idx), pruned, len(scene))
    logger.info(f"Densify: {report}")
    return report
