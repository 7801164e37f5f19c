import numpy as np
from PIL import Image

DEPTH_MAX_UNITS = 65535


def _as_numpy(image):
    if hasattr(image, "detach"):
        image = image.detach().cpu().double().numpy()
    return np.asarray(image, dtype=np.float64)


def save_rgb(path, image):
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB."""
    rgb = np.clip(np.rint(_as_numpy(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_rgb(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def depth_scale_for(depth):
    """World units per 16-bit step so the deepest pixel still fits."""
    peak = float(np.max(_as_numpy(depth))) if np.size(depth) else 0.0
    return peak / DEPTH_MAX_UNITS if peak > 0 else 1.0 / DEPTH_MAX_UNITS


def save_depth16(path, depth, scale):
    """Write depth as 16-bit integers of ``scale`` world units each."""
    units = np.clip(np.rint(_as_numpy(depth) / scale), 0, DEPTH_MAX_UNITS).astype(np.uint16)
    Image.fromarray(units).save(path)


def load_depth16(path, scale):
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) * scale


def save_normal(path, normal):
    """Write unit normals mapped from [-1, 1] to [0, 255]."""
    save_rgb(path, (np.clip(_as_numpy(normal), -1.0, 1.0) + 1.0) / 2.0)


def load_normal(path):
    return load_rgb(path) * 2.0 - 1.0
