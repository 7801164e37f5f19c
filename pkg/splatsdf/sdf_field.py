"""Neural signed distance field: multi-resolution hash encoding + MLP decoder.

The field maps a world position ``x`` to a signed distance ``s`` (negative inside) and a
positive sigmoid scale ``beta``. It is trained from LiDAR rays with a binary cross-entropy
occupancy loss plus Eikonal regularization.
"""
import math
import logging
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from splatsdf.utils.other import chunk_list

logger = logging.getLogger(__name__)

# Spatial hash primes, one per axis
HASH_PRIMES = (1, 2654435761, 805459861)
# Occupancy predictions are clamped before taking logs
OCCUPANCY_EPS = 1e-7
DEGENERATE_GRADIENT = 1e-8


@dataclass
class HashGridConfig:
    """Layout of the multi-resolution hash encoding.

    ``levels * features_per_level`` is the width of the concatenated feature vector and must
    be 32. ``bounds`` is ``((xmin, ymin, zmin), (xmax, ymax, zmax))`` in world units.
    """
    levels: int = 16
    features_per_level: int = 2
    table_size_log2: int = 19
    base_resolution: int = 16
    growth_factor: float = 1.5
    bounds: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        self.bounds = (tuple(float(v) for v in self.bounds[0]), tuple(float(v) for v in self.bounds[1]))
        self.validate()

    @property
    def feature_width(self):
        return self.levels * self.features_per_level

    @property
    def resolutions(self):
        return [int(math.floor(self.base_resolution * self.growth_factor ** level)) for level in range(self.levels)]

    def validate(self):
        if self.feature_width != 32:
            raise ValueError(f"levels x features_per_level must be 32, got {self.levels} x {self.features_per_level}")
        resolutions = self.resolutions
        if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
            raise ValueError(f"Hash grid resolutions must strictly increase, got {resolutions}")
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(hi <= lo):
            raise ValueError(f"Degenerate hash grid bounds {self.bounds}")

    def to_dict(self):
        return {
            "levels": self.levels,
            "features_per_level": self.features_per_level,
            "table_size_log2": self.table_size_log2,
            "base_resolution": self.base_resolution,
            "growth_factor": self.growth_factor,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
        }


class HashGridEncoding(nn.Module):
    """Trilinearly interpolated multi-level feature grids.

    Levels whose dense vertex grid fits in the table are indexed densely; finer levels use
    the three-prime XOR spatial hash.
    """

    def __init__(self, grid: HashGridConfig, init_std=1e-4):
        super().__init__()
        self.grid = grid
        self.resolutions = grid.resolutions
        table_size = 2 ** grid.table_size_log2
        self.dense = [(res + 1) ** 3 <= table_size for res in self.resolutions]
        self.tables = nn.ParameterList()
        for res, dense in zip(self.resolutions, self.dense):
            rows = (res + 1) ** 3 if dense else table_size
            self.tables.append(nn.Parameter(torch.randn(rows, grid.features_per_level) * init_std))
        self.register_buffer(
            "corner_offsets",
            torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long),
            persistent=False,
        )
        self.hash_mask = table_size - 1

    def _corner_indices(self, corners, level):
        res = self.resolutions[level]
        if self.dense[level]:
            stride = res + 1
            return corners[..., 0] + corners[..., 1] * stride + corners[..., 2] * stride * stride
        hashed = torch.zeros_like(corners[..., 0])
        for axis, prime in enumerate(HASH_PRIMES):
            hashed ^= corners[..., axis] * prime
        return hashed & self.hash_mask

    def forward(self, x01):
        """Encode normalized positions in ``[0, 1]^3`` into a (B, 32) feature matrix."""
        features = []
        offsets = self.corner_offsets
        for level, res in enumerate(self.resolutions):
            scaled = x01 * res
            base = torch.floor(scaled.detach()).clamp(0, res - 1)
            frac = scaled - base
            corners = base.long().unsqueeze(1) + offsets
            idx = self._corner_indices(corners, level)
            corner_features = self.tables[level][idx]
            # weights (B, 8): product over axes of frac or (1 - frac)
            picked = torch.where(offsets.bool(), frac.unsqueeze(1), 1.0 - frac.unsqueeze(1))
            weights = picked.prod(dim=-1)
            features.append((weights.unsqueeze(-1) * corner_features).sum(dim=1))
        return torch.cat(features, dim=-1)


def occupancy(v, h):
    """Sigmoid occupancy ``Phi(v, h) = 1 / (1 + exp(-v / h))``."""
    return torch.sigmoid(v / h)


class SdfField(nn.Module):
    """Hash-encoded MLP mapping a position to ``(s, beta)``.

    Parameters
    ----------
    grid : HashGridConfig
        Encoding layout and world bounds.
    hidden_width : int
        Width of each hidden layer.
    hidden_layers : int
        Number of hidden ReLU layers.
    beta_min : float
        Floor of the positive scale output, world units.
    beta_init : float
        Initial value of ``beta`` everywhere.
    """

    def __init__(self, grid=None, hidden_width=64, hidden_layers=3, beta_min=1e-3, beta_init=0.1):
        super().__init__()
        self.grid = grid if grid is not None else HashGridConfig()
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        self.beta_min = beta_min
        self.beta_init = beta_init
        self.encoding = HashGridEncoding(self.grid)
        layers = []
        width_in = self.grid.feature_width
        for _ in range(hidden_layers):
            layers += [nn.Linear(width_in, hidden_width), nn.ReLU()]
            width_in = hidden_width
        self.mlp = nn.Sequential(*layers)
        self.head = nn.Linear(width_in, 2)
        # Small head keeps the initial |s| near zero so early occupancy labels sit near 0.5
        with torch.no_grad():
            self.head.weight.uniform_(-1e-3, 1e-3)
            self.head.bias.zero_()
            self.head.bias[1] = math.log(math.expm1(max(beta_init - beta_min, 1e-6)))
        lo = torch.tensor(self.grid.bounds[0], dtype=torch.get_default_dtype())
        hi = torch.tensor(self.grid.bounds[1], dtype=torch.get_default_dtype())
        self.register_buffer("bounds_min", lo)
        self.register_buffer("bounds_max", hi)

    @property
    def bounds(self):
        return np.asarray(self.grid.bounds[0]), np.asarray(self.grid.bounds[1])

    def normalize(self, x):
        """Map world positions to ``[0, 1]^3``, clamping out-of-bounds points.

        Returns the normalized positions and a boolean mask of clamped rows.
        """
        lo = self.bounds_min.to(x.dtype)
        hi = self.bounds_max.to(x.dtype)
        clamped = ((x < lo) | (x > hi)).any(dim=-1)
        x = torch.maximum(torch.minimum(x, hi), lo)
        return (x - lo) / (hi - lo), clamped

    def forward(self, x):
        x01, _ = self.normalize(x)
        out = self.head(self.mlp(self.encoding(x01)))
        s = out[..., 0]
        beta = F.softplus(out[..., 1]) + self.beta_min
        return s, beta

    def query(self, x, with_flags=False):
        """Signed distance and scale at world positions ``x`` of shape (B, 3) or (3,).

        Raises ValueError for non-finite positions. With ``with_flags`` the mask of
        positions clamped to the field bounds is returned as a third value.
        """
        x = torch.as_tensor(x, dtype=self.bounds_min.dtype)
        single = x.dim() == 1
        if single:
            x = x.unsqueeze(0)
        if not torch.isfinite(x).all():
            raise ValueError("SDF query position contains non-finite values")
        s, beta = self(x)
        if single:
            s, beta = s[0], beta[0]
        if with_flags:
            _, clamped = self.normalize(x.detach())
            return s, beta, (clamped[0] if single else clamped)
        return s, beta

    def gradient(self, x, create_graph=False):
        """Spatial gradient ``ds/dx`` and a mask of degenerate (near-zero) gradients."""
        x = torch.as_tensor(x, dtype=self.bounds_min.dtype)
        if not torch.isfinite(x).all():
            raise ValueError("SDF gradient position contains non-finite values")
        single = x.dim() == 1
        x = (x.unsqueeze(0) if single else x).detach().requires_grad_(True)
        with torch.enable_grad():
            s, _ = self(x)
            (grad,) = torch.autograd.grad(s.sum(), x, create_graph=create_graph)
        degenerate = grad.norm(dim=-1) < DEGENERATE_GRADIENT
        if single:
            return grad[0], degenerate[0]
        return grad, degenerate

    @torch.no_grad()
    def evaluate(self, points, chunk_size=65536):
        """No-grad signed distance for a numpy (N, 3) array, returned as numpy."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points), dtype=np.float64)
        for start, chunk in zip(range(0, len(points), chunk_size), chunk_list(points, chunk_size)):
            s, _ = self(torch.as_tensor(chunk, dtype=self.bounds_min.dtype))
            out[start:start + len(chunk)] = s.double().numpy()
        return out

    def to_config(self):
        return {
            "grid": self.grid.to_dict(),
            "hidden_width": self.hidden_width,
            "hidden_layers": self.hidden_layers,
            "beta_min": self.beta_min,
            "beta_init": self.beta_init,
        }

    @classmethod
    def from_config(cls, cfg):
        grid = dict(cfg["grid"])
        grid["bounds"] = tuple(tuple(b) for b in grid["bounds"])
        return cls(
            HashGridConfig(**grid),
            hidden_width=cfg["hidden_width"],
            hidden_layers=cfg["hidden_layers"],
            beta_min=cfg["beta_min"],
            beta_init=cfg["beta_init"],
        )


@dataclass
class RayPool:
    """All LiDAR rays of one or more scans, flattened with per-ray origins."""
    origins: np.ndarray
    directions: np.ndarray
    distances: np.ndarray

    @classmethod
    def from_scans(cls, scans):
        scans = list(scans)
        if not scans:
            raise ValueError("At least one LiDAR scan is required")
        origins, directions, distances = [], [], []
        for scan in scans:
            valid = scan.valid
            directions.append(scan.directions[valid])
            distances.append(scan.distances[valid])
            origins.append(np.broadcast_to(scan.origin, (int(valid.sum()), 3)))
        return cls(np.concatenate(origins), np.concatenate(directions), np.concatenate(distances))

    def __len__(self):
        return len(self.distances)


@dataclass
class RaySampleBatch:
    """Samples along a batch of LiDAR rays.

    ``offsets`` (R, S) are ray parameters ``t_i``; ``labels`` are the measured occupancies
    ``Phi(-(t - t_i), beta_i)``; ``valid`` masks out free-space slots of rays too short to
    have a free-space interval.
    """
    origins: torch.Tensor
    directions: torch.Tensor
    depths: torch.Tensor
    offsets: torch.Tensor
    labels: torch.Tensor
    valid: torch.Tensor
    surface: torch.Tensor
    truncation: float = 0.0
    label_betas: Optional[torch.Tensor] = dataclass_field(default=None, repr=False)

    def positions(self):
        return self.origins.unsqueeze(1) + self.offsets.unsqueeze(-1) * self.directions.unsqueeze(1)

    def ray_distance(self):
        """``s_bar = t - t_i`` for every sample."""
        return self.depths.unsqueeze(1) - self.offsets

    def __len__(self):
        return int(self.valid.sum())


def sample_rays(
        scan,
        n_rays,
        generator,
        field,
        truncation,
        free_cutoff=0.05,
        surface_samples=4,
        free_samples=4,
    ):
    """Draw a training batch of samples along LiDAR rays.

    Parameters
    ----------
    scan : LidarScan, list of LidarScan or RayPool
        Source rays.
    n_rays : int
        Rays drawn uniformly with replacement.
    generator : torch.Generator
        Random stream for ray selection and sample offsets.
    field : SdfField
        Provides the scale ``beta_i`` used to convert ray distances into labels.
    truncation : float
        Half width ``tau`` of the surface band ``[t - tau, t + tau]``.
    free_cutoff : float
        Lower cutoff ``epsilon`` of the free-space interval ``[epsilon, t - tau]``.

    Returns
    -------
    RaySampleBatch
        Offsets sorted along each ray, labels in (0, 1).
    """
    pool = scan if isinstance(scan, RayPool) else RayPool.from_scans(scan if isinstance(scan, (list, tuple)) else [scan])
    if len(pool) == 0:
        raise ValueError("Cannot sample rays from an empty scan")
    dtype = torch.get_default_dtype()
    pick = torch.randint(0, len(pool), (n_rays,), generator=generator)
    index = pick.numpy()
    origins = torch.as_tensor(pool.origins[index], dtype=dtype)
    directions = torch.as_tensor(pool.directions[index], dtype=dtype)
    depths = torch.as_tensor(pool.distances[index], dtype=dtype)

    u_surface = torch.rand((n_rays, surface_samples), generator=generator, dtype=dtype)
    u_free = torch.rand((n_rays, free_samples), generator=generator, dtype=dtype)
    surface_t = depths.unsqueeze(1) - truncation + 2.0 * truncation * u_surface
    free_hi = depths - truncation
    has_free = free_hi > free_cutoff
    free_t = free_cutoff + (free_hi - free_cutoff).clamp(min=0.0).unsqueeze(1) * u_free

    offsets = torch.cat([free_t, surface_t], dim=1)
    surface = torch.cat([
        torch.zeros((n_rays, free_samples), dtype=torch.bool),
        torch.ones((n_rays, surface_samples), dtype=torch.bool),
    ], dim=1)
    valid = surface | has_free.unsqueeze(1)
    offsets, order = torch.sort(offsets, dim=1)
    surface = torch.gather(surface, 1, order)
    valid = torch.gather(valid, 1, order)

    batch = RaySampleBatch(
        origins=origins,
        directions=directions,
        depths=depths,
        offsets=offsets,
        labels=torch.zeros_like(offsets),
        valid=valid,
        surface=surface,
        truncation=truncation,
    )
    with torch.no_grad():
        _, betas = field(batch.positions().reshape(-1, 3))
        betas = betas.reshape(offsets.shape)
    batch.label_betas = betas
    batch.labels = occupancy(-batch.ray_distance(), betas).clamp(OCCUPANCY_EPS, 1.0 - OCCUPANCY_EPS)
    return batch


def _bce_terms(s, beta, labels, swap_roles):
    predicted = occupancy(-s, beta).clamp(OCCUPANCY_EPS, 1.0 - OCCUPANCY_EPS)
    if swap_roles:
        # Literal printed form: prediction as the weight, measurement inside the logs
        return -(predicted * torch.log(labels) + (1.0 - predicted) * torch.log(1.0 - labels))
    return -(labels * torch.log(predicted) + (1.0 - labels) * torch.log(1.0 - predicted))


def loss_bce(field, batch, swap_roles=False):
    """Binary cross-entropy between predicted and measured occupancy, summed over samples."""
    if len(batch) == 0:
        raise ValueError("loss_bce needs a non-empty batch")
    points = batch.positions()[batch.valid]
    s, beta = field(points)
    return _bce_terms(s, beta, batch.labels[batch.valid], swap_roles).sum()


def _eikonal_terms(grad):
    norm = grad.norm(dim=-1)
    degenerate = norm < DEGENERATE_GRADIENT
    if degenerate.any():
        # Below the threshold the norm is replaced by its projection on a fixed unit axis, a
        # subgradient of length 1 that points toward increasing norm.
        axis = torch.zeros_like(grad)
        axis[..., 0] = 1.0
        norm = torch.where(degenerate, (grad * axis).sum(-1), norm)
    return (norm - 1.0) ** 2


def loss_eikonal(field, points):
    """``sum (||grad f(x_i)|| - 1)^2`` with gradients reaching the field parameters."""
    points = torch.as_tensor(points, dtype=field.bounds_min.dtype).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("loss_eikonal needs at least one point")
    x = points.detach().requires_grad_(True)
    with torch.enable_grad():
        s, _ = field(x)
        (grad,) = torch.autograd.grad(s.sum(), x, create_graph=True)
        return _eikonal_terms(grad).sum()


def sdf_losses(field, batch, swap_roles=False):
    """BCE and Eikonal losses sharing a single field forward pass over the batch samples."""
    if len(batch) == 0:
        raise ValueError("sdf_losses needs a non-empty batch")
    x = batch.positions()[batch.valid].detach().requires_grad_(True)
    s, beta = field(x)
    (grad,) = torch.autograd.grad(s.sum(), x, create_graph=True)
    bce = _bce_terms(s, beta, batch.labels[batch.valid], swap_roles).sum()
    eikonal = _eikonal_terms(grad).sum()
    return bce, eikonal, grad.detach()
