"""Two-stage optimization: SDF pretraining, SDF-aided initialization and joint training.

``run_pipeline`` chains the stages and writes every artifact into one output directory::

    sdf.ckpt  init.ckpt  joint.ckpt     stage checkpoints
    sdf_metrics.csv  metrics.csv        loss curves
    mesh.ply  splats.ply                geometry exports
    renders/                            held-out color, depth and normal PNGs
    report.csv  summary.txt             evaluation
    stage_status.txt                    one "stage status" line per stage
"""
import os
import csv
import math
import logging
import dataclasses
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch
from tqdm import tqdm

from splatsdf import evalkit
from splatsdf.diff_core import adam_step, backward, build_adam, seed_everything, set_group_lr
from splatsdf.errors import ConfigError, DatasetError, NonFiniteError, SplatSdfError, StageError
from splatsdf.geometry_init import (
    color_pretrain,
    init_sky,
    init_splats_from_sdf,
    init_splats_random,
    marching_cubes,
)
from splatsdf.load_data import INIT_VARIANT_CHOICES, REGULARIZER_CHOICES
from splatsdf.rasterizer import loss_color, render, view_space_gradient
from splatsdf.regularizers import loss_center, loss_render_consistency, loss_shape, zero_set_residual
from splatsdf.sdf_field import HashGridConfig, RayPool, SdfField, sample_rays, sdf_losses
from splatsdf.splat_scene import SplatScene, densify_and_prune
from splatsdf.utils.checkpoint import load_checkpoint, restore_rng, rng_state, save_checkpoint
from splatsdf.utils.config_file import KeyValueStore, convert_value
from splatsdf.utils.dataset import Dataset

logger = logging.getLogger(__name__)

SDF_COLUMNS = ("iter", "sdf", "eikonal", "total", "lr")
JOINT_COLUMNS = ("iter", "sdf", "eikonal", "color", "render", "shape", "total", "psnr")
STAGES = ("data", "sdf", "init", "joint", "mesh", "eval")

# Keys that only affect the joint stage and later; stage checkpoints ignore them
JOINT_KEYS = (
    "lambda_render", "lambda_shape", "regularizer", "shape_to_field", "freeze_field_in_joint",
    "normal_alpha_threshold", "lr_position", "lr_position_final", "lr_rotation", "lr_scale", "lr_opacity",
    "lr_sh", "densify_from", "densify_until", "densify_every", "grad_threshold", "opacity_floor",
    "scale_split_fraction", "max_splats", "joint_iters", "log_every", "checkpoint_every",
    "fscore_threshold", "eval_points", "eval_crop",
)
INIT_KEYS = (
    "sh_degree", "init_resolution", "scale_min", "scale_max", "sky_splats", "sky_radius_factor",
    "init_variant", "random_init_splats", "color_pretrain_epochs", "lr_color_pretrain", "ssim_weight",
)


def _key(default, section):
    return dataclass_field(default=default, metadata={"section": section})


@dataclass
class TrainConfig:
    """Every tunable of the pipeline, grouped into config-file sections.

    Lengths (``truncation``, ``mc_cell``, ``free_cutoff``) are world units; a length of 0
    is derived from the scene extent. Learning rate ``lr_position`` is multiplied by the
    extent.
    """

    # [sdf]
    sdf_iters: int = _key(10000, "sdf")
    rays_per_batch: int = _key(4096, "sdf")
    surface_samples: int = _key(4, "sdf")
    free_samples: int = _key(4, "sdf")
    truncation: float = _key(0.0, "sdf")
    free_cutoff: float = _key(0.05, "sdf")
    bce_swap_roles: bool = _key(False, "sdf")
    hash_levels: int = _key(16, "sdf")
    hash_features: int = _key(2, "sdf")
    hash_table_size_log2: int = _key(19, "sdf")
    hash_base_resolution: int = _key(16, "sdf")
    hash_growth: float = _key(1.5, "sdf")
    mlp_width: int = _key(64, "sdf")
    mlp_layers: int = _key(3, "sdf")
    beta_min: float = _key(1e-3, "sdf")
    beta_init: float = _key(0.1, "sdf")
    mc_cell: float = _key(0.0, "sdf")
    mc_resolution: int = _key(256, "sdf")
    # [splats]
    sh_degree: int = _key(2, "splats")
    init_resolution: int = _key(256, "splats")
    scale_min: float = _key(1e-4, "splats")
    scale_max: float = _key(1.0, "splats")
    sky_splats: int = _key(1000, "splats")
    sky_radius_factor: float = _key(2.0, "splats")
    init_variant: str = _key("sdf", "splats")
    random_init_splats: int = _key(5000, "splats")
    color_pretrain_epochs: int = _key(1, "splats")
    # [loss]
    lambda_eikonal: float = _key(0.1, "loss")
    lambda_render: float = _key(0.01, "loss")
    lambda_shape: float = _key(0.005, "loss")
    ssim_weight: float = _key(0.2, "loss")
    regularizer: str = _key("render+shape", "loss")
    shape_to_field: bool = _key(True, "loss")
    freeze_field_in_joint: bool = _key(False, "loss")
    normal_alpha_threshold: float = _key(0.5, "loss")
    # [optim]
    lr_position: float = _key(1.6e-4, "optim")
    lr_position_final: float = _key(1.6e-6, "optim")
    lr_rotation: float = _key(1e-3, "optim")
    lr_scale: float = _key(5e-3, "optim")
    lr_opacity: float = _key(5e-2, "optim")
    lr_sh: float = _key(2.5e-3, "optim")
    lr_field: float = _key(1e-3, "optim")
    lr_field_min: float = _key(1e-5, "optim")
    lr_color_pretrain: float = _key(0.025, "optim")
    adam_eps: float = _key(1e-15, "optim")
    # [densify]
    densify_from: int = _key(1500, "densify")
    densify_until: int = _key(15000, "densify")
    densify_every: int = _key(500, "densify")
    grad_threshold: float = _key(2e-4, "densify")
    opacity_floor: float = _key(0.05, "densify")
    scale_split_fraction: float = _key(0.01, "densify")
    max_splats: int = _key(0, "densify")
    # [schedule]
    joint_iters: int = _key(30000, "schedule")
    log_every: int = _key(100, "schedule")
    checkpoint_every: int = _key(5000, "schedule")
    seed: int = _key(0, "schedule")
    # [data]
    holdout_every: int = _key(8, "data")
    bounds_margin: float = _key(0.1, "data")
    fscore_threshold: float = _key(0.02, "data")
    eval_points: int = _key(100000, "data")
    eval_crop: int = _key(2, "data")

    def __post_init__(self):
        self.validate()

    @classmethod
    def sections(cls):
        """Section name -> ordered list of key names."""
        sections = {}
        for f in dataclasses.fields(cls):
            sections.setdefault(f.metadata["section"], []).append(f.name)
        return sections

    def validate(self):
        for name in ("lambda_eikonal", "lambda_render", "lambda_shape"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("sdf_iters", "joint_iters", "rays_per_batch", "surface_samples", "log_every",
                     "checkpoint_every", "densify_every", "mc_resolution", "init_resolution"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.free_samples < 0 or self.color_pretrain_epochs < 0 or self.sky_splats < 0:
            raise ConfigError("free_samples, color_pretrain_epochs and sky_splats must be >= 0")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ConfigError(f"ssim_weight must lie in [0, 1], got {self.ssim_weight}")
        if self.regularizer not in REGULARIZER_CHOICES:
            raise ConfigError(f"regularizer must be one of {REGULARIZER_CHOICES}, got {self.regularizer!r}")
        if self.init_variant not in INIT_VARIANT_CHOICES:
            raise ConfigError(f"init_variant must be one of {INIT_VARIANT_CHOICES}, got {self.init_variant!r}")
        if self.truncation < 0 or self.mc_cell < 0:
            raise ConfigError("truncation and mc_cell must be >= 0 (0 derives them from the scene extent)")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        store = KeyValueStore()
        for section, names in self.sections().items():
            for name in names:
                value = getattr(self, name)
                store.set(section, name, repr(value) if isinstance(value, float) else value)
        return store.to_text()

    @classmethod
    def from_text(cls, text, source="<string>", base=None):
        """Parse config text on top of ``base`` (defaults when None).

        A key outside its section, or one that does not exist, raises ConfigError listing
        the valid keys of that section.
        """
        store = KeyValueStore()
        store.read_string(text, source=source)
        sections = cls.sections()
        types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for section in store.sections():
            if section not in sections:
                raise ConfigError(f"{source}: unknown section [{section}]; valid sections are {list(sections)}")
            for key, raw in store.items(section):
                if key not in sections[section]:
                    raise ConfigError(f"{source}: unknown key '{key}' in [{section}]; valid keys are {sections[section]}")
                values[key] = _coerce(key, convert_value(raw), types[key], source)
        return cls(**values)

    @classmethod
    def from_file(cls, path, base=None):
        if not os.path.isfile(path):
            raise ConfigError(f"Config file {path} does not exist")
        with open(path) as f:
            return cls.from_text(f.read(), source=path, base=base)

    def with_overrides(self, overrides):
        """Apply ``section.key=value`` or ``key=value`` strings."""
        lines = []
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"Override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            key = key.strip()
            section = key.split(".", 1)[0] if "." in key else self.section_of(key)
            lines += [f"[{section}]", f"{key.split('.', 1)[-1]} = {value.strip()}"]
        return TrainConfig.from_text("\n".join(lines), source="override", base=self)

    @classmethod
    def section_of(cls, key):
        for f in dataclasses.fields(cls):
            if f.name == key:
                return f.metadata["section"]
        valid = [f.name for f in dataclasses.fields(cls)]
        raise ConfigError(f"Unknown config key '{key}'; valid keys are {valid}")

    def mc_cell_for(self, extent):
        return self.mc_cell if self.mc_cell > 0 else extent / self.mc_resolution

    def init_cell_for(self, extent):
        return extent / self.init_resolution

    def truncation_for(self, extent):
        return self.truncation if self.truncation > 0 else 5.0 * self.mc_cell_for(extent)


def _coerce(key, value, kind, source):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{source}: '{key}' expects true/false, got {value!r}")
        return value
    if kind is str:
        return str(value)
    if isinstance(value, bool) or isinstance(value, str):
        raise ConfigError(f"{source}: '{key}' expects a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"{source}: '{key}' expects an integer, got {value!r}")
        return int(value)
    return float(value)


class MetricsLog:
    """Append-only CSV of per-iteration loss terms."""

    def __init__(self, path, columns, append=False):
        self.path = path
        self.columns = tuple(columns)
        exists = append and os.path.isfile(path)
        self._file = open(path, "a" if exists else "w", newline="")
        self._writer = csv.writer(self._file)
        if not exists:
            self._writer.writerow(self.columns)

    def write(self, row):
        self._writer.writerow([_format_metric(row.get(column, "")) for column in self.columns])
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _format_metric(value):
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.10g}"
    return value


def cosine_lr(lr, lr_min, step, total):
    progress = min(max(step / max(total, 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * progress))


def exponential_lr(lr, lr_final, step, total):
    progress = min(max(step / max(total, 1), 0.0), 1.0)
    return math.exp((1.0 - progress) * math.log(lr) + progress * math.log(lr_final))


def build_field(cfg, bounds):
    lo, hi = (tuple(float(v) for v in b) for b in bounds)
    grid = HashGridConfig(
        levels=cfg.hash_levels,
        features_per_level=cfg.hash_features,
        table_size_log2=cfg.hash_table_size_log2,
        base_resolution=cfg.hash_base_resolution,
        growth_factor=cfg.hash_growth,
        bounds=(lo, hi),
    )
    return SdfField(grid, cfg.mlp_width, cfg.mlp_layers, cfg.beta_min, cfg.beta_init)


def scene_extent(bounds):
    lo, hi = bounds
    return float(np.max(np.asarray(hi) - np.asarray(lo)))


# Checkpoints

def field_state(field):
    return {"config": field.to_config(), "state": field.state_dict()}


def field_from_state(state):
    field = SdfField.from_config(state["config"])
    field.load_state_dict(state["state"])
    return field


def save_training_state(path, cfg, generator, field=None, scene=None, optimizer=None, progress=None):
    sections = {"config": cfg.to_text(), "rng": rng_state(generator)}
    if field is not None:
        sections["sdf_field"] = field_state(field)
    if scene is not None:
        sections["splats"] = scene.state()
    if optimizer is not None:
        sections["optimizer"] = optimizer.state_dict()
    if progress is not None:
        sections["progress"] = progress
    save_checkpoint(path, sections)


def load_training_state(path, generator=None):
    """Decode a checkpoint into ``{cfg, field, scene, optimizer, progress}``, restoring RNG state."""
    sections = load_checkpoint(path)
    state = {
        "cfg": TrainConfig.from_text(sections["config"], source=f"{path}[config]") if "config" in sections else None,
        "field": field_from_state(sections["sdf_field"]) if "sdf_field" in sections else None,
        "scene": SplatScene.from_state(sections["splats"]) if "splats" in sections else None,
        "optimizer": sections.get("optimizer"),
        "progress": sections.get("progress"),
    }
    if generator is not None and "rng" in sections:
        restore_rng(generator, sections["rng"])
    return state


def stage_fingerprint(cfg, ignore):
    """Config text with the ``ignore`` keys reset to their defaults."""
    defaults = TrainConfig()
    return cfg.replace(**{key: getattr(defaults, key) for key in ignore}).to_text()


def checkpoint_matches(path, cfg, ignore=()):
    """True when ``path`` exists and was written with ``cfg`` up to the ``ignore`` keys."""
    if not os.path.isfile(path):
        return False
    try:
        stored = TrainConfig.from_text(load_checkpoint(path, sections=["config"])["config"], source=path)
    except SplatSdfError as e:
        logger.warning(f"Ignoring unreadable stage checkpoint {path}: {e}")
        return False
    return stage_fingerprint(stored, ignore) == stage_fingerprint(cfg, ignore)


# SDF stage

def sdf_optimizer(field, cfg):
    return build_adam({"field": (list(field.parameters()), cfg.lr_field)}, eps=cfg.adam_eps)


def train_sdf(field, scans, cfg, generator=None, checkpoint_path=None, metrics=None, progress=False):
    """Fit ``field`` to LiDAR rays for ``cfg.sdf_iters`` steps.

    Each step draws a ray batch, minimizes ``loss_bce + lambda_eikonal * loss_eikonal``
    and takes one Adam step under a cosine learning-rate decay.

    Returns
    -------
    list of float
        Total loss per iteration.

    Raises
    ------
    StageError
        When a loss or gradient goes non-finite. The last finite state is saved to
        ``checkpoint_path`` first.
    """
    pool = scans if isinstance(scans, RayPool) else RayPool.from_scans(scans) if scans else None
    if pool is None or len(pool) == 0:
        raise DatasetError("SDF training needs at least one LiDAR return")
    generator = generator if generator is not None else seed_everything(cfg.seed)
    extent = scene_extent(field.bounds)
    truncation = cfg.truncation_for(extent)
    optimizer = sdf_optimizer(field, cfg)
    named = list(field.named_parameters())
    logger.info(f"SDF stage: {cfg.sdf_iters} iterations, {cfg.rays_per_batch} rays per batch, truncation {truncation:g}")

    losses = []
    for it in tqdm(range(1, cfg.sdf_iters + 1), desc="sdf", disable=not progress):
        lr = cosine_lr(cfg.lr_field, cfg.lr_field_min, it - 1, cfg.sdf_iters)
        set_group_lr(optimizer, "field", lr)
        batch = sample_rays(
            pool, cfg.rays_per_batch, generator, field, truncation,
            free_cutoff=cfg.free_cutoff, surface_samples=cfg.surface_samples, free_samples=cfg.free_samples,
        )
        bce, eikonal, _ = sdf_losses(field, batch, cfg.bce_swap_roles)
        eikonal = cfg.lambda_eikonal * eikonal
        total = bce + eikonal
        try:
            for name, term in (("sdf", bce), ("eikonal", eikonal)):
                if not torch.isfinite(term):
                    raise NonFiniteError(f"SDF loss term '{name}' is non-finite at iteration {it}", where=name)
            backward(total, named)
        except NonFiniteError as e:
            if checkpoint_path is not None:
                save_training_state(checkpoint_path, cfg, generator, field=field, progress={"stage": "sdf", "iteration": it - 1})
            raise StageError("sdf", f"{e} (last finite state saved to {checkpoint_path})") from e
        adam_step(optimizer, it)
        losses.append(float(total))
        if it % cfg.log_every == 0 or it == cfg.sdf_iters:
            logger.info(f"sdf {it:6d}  bce {float(bce):.6g}  eikonal {float(eikonal):.6g}  lr {lr:.3g}")
            if metrics is not None:
                metrics.write({"iter": it, "sdf": float(bce), "eikonal": float(eikonal), "total": float(total), "lr": lr})
    return losses


# Initialization stage

def initialize_scene(field, dataset, cfg, generator, bounds=None):
    """Build the starting splat scene for ``cfg.init_variant``."""
    bounds = bounds if bounds is not None else field.bounds
    extent = scene_extent(bounds)
    cell = cfg.init_cell_for(extent)
    if cfg.init_variant == "random":
        points = np.concatenate([scan.endpoints() for scan in dataset.scans])
        scene = init_splats_random(points, cfg.random_init_splats, cell, generator, cfg.sh_degree, cfg.scale_min, cfg.scale_max)
    else:
        scene, report = init_splats_from_sdf(
            field, cell, sh_degree=cfg.sh_degree, scale_min=cfg.scale_min, scale_max=cfg.scale_max
        )
        logger.debug(f"SDF init report: {report.vertices} vertices, {report.degenerate_normals} degenerate normals")
    if cfg.sky_splats > 0:
        scene.extend(init_sky(bounds, cfg.sky_splats, cfg.sky_radius_factor, sh_degree=cfg.sh_degree, scale_min=cfg.scale_min))
    if cfg.init_variant == "sdf" and cfg.color_pretrain_epochs > 0:
        train_views, _ = dataset.split()
        color_pretrain(scene, train_views, cfg.color_pretrain_epochs, cfg.lr_color_pretrain, cfg.ssim_weight)
    return scene


# Joint stage

class ViewSampler:
    """Shuffled epochs over the training views, drawn from a seeded generator."""

    def __init__(self, count, generator):
        if count < 1:
            raise DatasetError("Joint training needs at least one training view")
        self.count = count
        self.generator = generator
        self.order = []
        self.position = 0

    def next(self):
        if self.position >= len(self.order):
            self.order = torch.randperm(self.count, generator=self.generator).tolist()
            self.position = 0
        index = self.order[self.position]
        self.position += 1
        return index

    def state(self):
        return {"order": list(self.order), "position": self.position}

    def load(self, state):
        self.order = list(state["order"])
        self.position = int(state["position"])


def joint_optimizer(scene, field, cfg, extent):
    groups = {
        "means": ([scene.means], cfg.lr_position * extent),
        "quats": ([scene.quats], cfg.lr_rotation),
        "log_scales": ([scene.log_scales], cfg.lr_scale),
        "opacity_logits": ([scene.opacity_logits], cfg.lr_opacity),
        "sh": ([scene.sh], cfg.lr_sh),
    }
    if not cfg.freeze_field_in_joint:
        groups["field"] = (list(field.parameters()), cfg.lr_field)
    return build_adam(groups, eps=cfg.adam_eps)


def joint_loss_terms(field, scene, camera, cfg, generator, pool=None, truncation=None):
    """Render one view and evaluate every term of the total joint loss.

    Each returned term already carries its weight so that the total is their plain sum.
    Terms whose weight is zero (or that are disabled) are absent from the dictionary.

    Returns
    -------
    terms : dict
        ``sdf``, ``eikonal``, ``color``, ``render``, ``shape`` scalar tensors.
    out : RenderOutput
        The render of ``camera``.
    """
    out = render(scene, camera)
    terms = {}
    if not cfg.freeze_field_in_joint and pool is not None:
        batch = sample_rays(
            pool, cfg.rays_per_batch, generator, field, truncation,
            free_cutoff=cfg.free_cutoff, surface_samples=cfg.surface_samples, free_samples=cfg.free_samples,
        )
        bce, eikonal, _ = sdf_losses(field, batch, cfg.bce_swap_roles)
        terms["sdf"] = bce
        if cfg.lambda_eikonal > 0:
            terms["eikonal"] = cfg.lambda_eikonal * eikonal
    terms["color"] = loss_color(out, camera.image, cfg.ssim_weight)
    if cfg.lambda_render > 0:
        terms["render"] = cfg.lambda_render * loss_render_consistency(out, camera, cfg.normal_alpha_threshold)
    if cfg.lambda_shape > 0 and cfg.regularizer != "render":
        to_field = cfg.shape_to_field and not cfg.freeze_field_in_joint
        weights = out.splat_weights.detach()
        if cfg.regularizer == "render+shape":
            terms["shape"] = cfg.lambda_shape * loss_shape(scene, field, weights, generator, to_field=to_field)
        else:
            terms["shape"] = cfg.lambda_shape * loss_center(scene, field, weights, to_field=to_field)
    return terms, out


def train_joint(
        field,
        scene,
        dataset,
        cfg,
        generator=None,
        resume_state=None,
        checkpoint_path=None,
        metrics=None,
        progress=False,
    ):
    """Jointly optimize splats and field for ``cfg.joint_iters`` steps.

    Parameters
    ----------
    resume_state : dict, optional
        ``optimizer`` state dict and ``progress`` section of a joint checkpoint to continue from.
    checkpoint_path : str, optional
        Written every ``checkpoint_every`` iterations, at the end, and on failure.

    Returns
    -------
    (SdfField, SplatScene)
    """
    generator = generator if generator is not None else seed_everything(cfg.seed)
    train_views, _ = dataset.split()
    sampler = ViewSampler(len(train_views), generator)
    extent = scene_extent(field.bounds)
    truncation = cfg.truncation_for(extent)
    pool = RayPool.from_scans(dataset.scans) if dataset.scans and not cfg.freeze_field_in_joint else None
    optimizer = joint_optimizer(scene, field, cfg, extent)
    start = 1
    if resume_state is not None:
        optimizer.load_state_dict(resume_state["optimizer"])
        done = resume_state["progress"]
        start = done["iteration"] + 1
        sampler.load(done["sampler"])
        for name in ("grad_accum", "denom", "weight_accum", "max_response"):
            setattr(scene.stats, name, done["stats"][name].clone())
    logger.info(
        f"Joint stage: iterations {start}..{cfg.joint_iters}, {len(scene)} splats, {len(train_views)} training views, "
        f"regularizer {cfg.regularizer}"
    )

    def snapshot(iteration):
        stats = {name: getattr(scene.stats, name).clone() for name in ("grad_accum", "denom", "weight_accum", "max_response")}
        return {"stage": "joint", "iteration": iteration, "sampler": sampler.state(), "stats": stats}

    for it in tqdm(range(start, cfg.joint_iters + 1), desc="joint", disable=not progress):
        set_group_lr(optimizer, "means", exponential_lr(cfg.lr_position, cfg.lr_position_final, it - 1, cfg.joint_iters) * extent)
        if not cfg.freeze_field_in_joint:
            set_group_lr(optimizer, "field", cosine_lr(cfg.lr_field, cfg.lr_field_min, it - 1, cfg.joint_iters))
        camera = train_views[sampler.next()]
        terms, out = joint_loss_terms(field, scene, camera, cfg, generator, pool, truncation)
        total = sum(terms.values())
        named = list(scene.param_dict().items())
        if not cfg.freeze_field_in_joint:
            named += [(f"field.{name}", p) for name, p in field.named_parameters()]
        try:
            for name, term in terms.items():
                if not torch.isfinite(term):
                    raise NonFiniteError(f"Joint loss term '{name}' is non-finite at iteration {it}", where=name)
            backward(total, named)
        except NonFiniteError as e:
            if checkpoint_path is not None:
                optimizer.zero_grad(set_to_none=False)
                save_training_state(checkpoint_path, cfg, generator, field, scene, optimizer, snapshot(it - 1))
            raise StageError("joint", f"{e} (last finite state saved to {checkpoint_path})") from e

        scene.stats.add_view(
            view_space_gradient(scene.means.detach(), scene.means.grad, camera),
            out.splat_weights.detach(),
            out.max_response.detach(),
        )
        adam_step(optimizer, it)
        scene.normalize_()

        if cfg.densify_from <= it < cfg.densify_until and it % cfg.densify_every == 0:
            threshold = cfg.grad_threshold
            if cfg.max_splats and len(scene) >= cfg.max_splats:
                threshold = math.inf
            report = densify_and_prune(
                scene, threshold, cfg.opacity_floor, cfg.scale_split_fraction * extent, generator, optimizer
            )
            logger.debug(f"densify {it}: {report}")

        if it % cfg.log_every == 0 or it == cfg.joint_iters:
            row = {"iter": it, "total": float(total), "psnr": evalkit.psnr(out.color.detach(), camera.image)}
            row.update({column: float(terms[column]) if column in terms else 0.0 for column in JOINT_COLUMNS[1:6]})
            logger.info(
                f"joint {it:6d}  " + "  ".join(f"{k} {row[k]:.6g}" for k in JOINT_COLUMNS[1:7])
                + f"  psnr {row['psnr']:.2f}  splats {len(scene)}"
            )
            if metrics is not None:
                metrics.write(row)
        if checkpoint_path is not None and (it % cfg.checkpoint_every == 0 or it == cfg.joint_iters):
            save_training_state(checkpoint_path, cfg, generator, field, scene, optimizer, snapshot(it))
    return field, scene


# Pipeline

class StageStatus:
    """``stage_status.txt``: one ``stage status [detail]`` line per finished or failed stage."""

    def __init__(self, path):
        self.path = path
        self.status = {}
        if os.path.isfile(path):
            with open(path) as f:
                for line in f:
                    if line.strip():
                        stage, _, rest = line.strip().partition(" ")
                        self.status[stage] = rest

    def set(self, stage, status):
        self.status[stage] = status
        with open(self.path, "w") as f:
            for name in STAGES:
                if name in self.status:
                    f.write(f"{name} {self.status[name]}\n")


def _run_stage(status, stage, fn):
    try:
        result = fn()
    except StageError as e:
        status.set(stage, f"failed {e}")
        raise
    except SplatSdfError as e:
        status.set(stage, f"failed {e}")
        raise StageError(stage, str(e)) from e
    status.set(stage, "done")
    return result


def export_mesh(field, cfg, path, bounds=None, progress=False):
    extent = scene_extent(bounds if bounds is not None else field.bounds)
    mesh = marching_cubes(field, cfg.mc_cell_for(extent), progress=progress)
    if mesh.is_empty:
        logger.warning(f"Zero level set is empty; {path} not written")
    else:
        mesh.export(path)
    return mesh


def sdf_stage(dataset, cfg, out_dir, generator, bounds, resume=True, progress=False):
    """Train (or reuse) the field; writes ``sdf.ckpt`` and ``sdf_metrics.csv``."""
    path = os.path.join(out_dir, "sdf.ckpt")
    if resume and checkpoint_matches(path, cfg, JOINT_KEYS + INIT_KEYS):
        logger.info(f"Reusing {path}")
        return load_training_state(path, generator)["field"]
    field = build_field(cfg, bounds)
    with MetricsLog(os.path.join(out_dir, "sdf_metrics.csv"), SDF_COLUMNS) as metrics:
        train_sdf(field, dataset.scans, cfg, generator, checkpoint_path=path, metrics=metrics, progress=progress)
    save_training_state(path, cfg, generator, field=field, progress={"stage": "sdf", "iteration": cfg.sdf_iters})
    return field


def init_stage(field, dataset, cfg, out_dir, generator, bounds, resume=True):
    """Initialize (or reuse) the splats; writes ``init.ckpt`` holding field and scene."""
    path = os.path.join(out_dir, "init.ckpt")
    if resume and checkpoint_matches(path, cfg, JOINT_KEYS):
        logger.info(f"Reusing {path}")
        state = load_training_state(path, generator)
        return state["field"], state["scene"]
    scene = initialize_scene(field, dataset, cfg, generator, bounds)
    save_training_state(path, cfg, generator, field=field, scene=scene, progress={"stage": "init", "iteration": 0})
    return field, scene


def joint_stage(field, scene, dataset, cfg, out_dir, generator, resume_path=None, progress=False):
    """Joint optimization; writes ``joint.ckpt``, ``metrics.csv`` and ``splats.ply``.

    ``resume_path`` continues from a joint checkpoint instead of ``field`` and ``scene``.
    """
    resume_state = None
    if resume_path is not None:
        state = load_training_state(resume_path, generator)
        if state["optimizer"] is None or state["progress"] is None or state["progress"].get("stage") != "joint":
            raise StageError("joint", f"{resume_path} is not a joint-stage checkpoint")
        field, scene = state["field"], state["scene"]
        resume_state = {"optimizer": state["optimizer"], "progress": state["progress"]}
    path = os.path.join(out_dir, "joint.ckpt")
    with MetricsLog(os.path.join(out_dir, "metrics.csv"), JOINT_COLUMNS, append=resume_path is not None) as metrics:
        field, scene = train_joint(
            field, scene, dataset, cfg, generator,
            resume_state=resume_state, checkpoint_path=path, metrics=metrics, progress=progress,
        )
    scene.export_ply(os.path.join(out_dir, "splats.ply"))
    return field, scene


def eval_stage(field, scene, mesh, dataset, cfg, out_dir, generator):
    """Mesh and held-out render metrics; writes ``report.csv``, ``summary.txt`` and ``renders/``."""
    _, test_views = dataset.split()
    metrics = {"splats": len(scene), "mesh_vertices": len(mesh.vertices)}
    if dataset.gt_mesh is not None and not mesh.is_empty:
        metrics.update(evalkit.evaluate_mesh(mesh, dataset.gt_mesh, cfg.fscore_threshold, cfg.eval_points, seed=cfg.seed))
    if test_views:
        metrics.update(evalkit.evaluate_renders(scene, test_views, crop=cfg.eval_crop, out_dir=os.path.join(out_dir, "renders")))
    metrics["zero_set_residual"] = zero_set_residual(scene, field, generator)
    evalkit.write_report(out_dir, metrics)
    return metrics


def run_pipeline(dataset_dir, cfg, out_dir, resume=True, progress=False):
    """Train, initialize, jointly optimize, mesh and evaluate one dataset.

    With ``resume`` the ``sdf.ckpt`` and ``init.ckpt`` stage checkpoints are reused when
    they were written with the same settings for those stages. Every stage records
    ``done`` or ``failed <reason>`` in ``stage_status.txt``. Returns the absolute output
    directory.
    """
    os.makedirs(out_dir, exist_ok=True)
    status = StageStatus(os.path.join(out_dir, "stage_status.txt"))
    dataset = _run_stage(status, "data", lambda: Dataset.load(dataset_dir, cfg.holdout_every))
    bounds = dataset.bounds(cfg.bounds_margin)
    generator = seed_everything(cfg.seed)
    with open(os.path.join(out_dir, "config.cfg"), "w") as f:
        f.write(cfg.to_text())

    field = _run_stage(status, "sdf", lambda: sdf_stage(dataset, cfg, out_dir, generator, bounds, resume, progress))
    field, scene = _run_stage(status, "init", lambda: init_stage(field, dataset, cfg, out_dir, generator, bounds, resume))
    field, scene = _run_stage(status, "joint", lambda: joint_stage(field, scene, dataset, cfg, out_dir, generator, progress=progress))
    mesh = _run_stage(status, "mesh", lambda: export_mesh(field, cfg, os.path.join(out_dir, "mesh.ply"), bounds, progress))
    _run_stage(status, "eval", lambda: eval_stage(field, scene, mesh, dataset, cfg, out_dir, generator))
    logger.info(f"Pipeline finished; artifacts in {out_dir}")
    return os.path.abspath(out_dir)
