"""Two-stage object editing in neural fields: erase an object, then generate a replacement.

Modules: scene_io (datasets, masks, crops), field (hash grid + MLP), renderer
(bubble volume rendering), guidance (noise schedule, CFG, score distillation),
objectives (halo reconstruction and depth terms), trainer (Erase / Replace /
monolithic loops), metrics (embedding-direction scores) and cli.
"""

__version__ = "0.1.0"

from .errors import Ram3dError  # noqa: F401
from .field import FieldConfig, field_forward, init_params  # noqa: F401
from .scene_io import SceneDataset, load_dataset  # noqa: F401
from .trainer import TrainConfig, run_erase, run_monolithic, run_replace  # noqa: F401
