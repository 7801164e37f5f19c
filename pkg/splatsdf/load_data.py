import os

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

# Full-scale constants (30000 joint iterations, 10000 SDF iterations)
DEFAULT_CONFIG = os.path.join(DATA_DIR, "default.cfg")

# Laptop-scale preset used by the acceptance runs
DESK_CONFIG = os.path.join(DATA_DIR, "desk.cfg")

PRESETS = {
    "default": DEFAULT_CONFIG,
    "desk": DESK_CONFIG,
}

SCENE_CHOICES = [
    "sphere",
    "box_room",
    "street",
]

REGULARIZER_CHOICES = [
    "render",
    "render+center",
    "render+shape",
]

INIT_VARIANT_CHOICES = [
    "sdf",
    "sdf_no_color",
    "random",
]
