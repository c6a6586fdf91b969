"""Run configuration: one YAML document, parsed strictly.

Every section maps onto a dataclass; unknown keys anywhere are an error so a
misspelt option never silently falls back to its default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from dataclasses import field as dc_field
from typing import List, Optional

import yaml

from .errors import ConfigError
from .field import FieldConfig
from .scene_io import DatasetConfig
from .trainer import TrainConfig


@dataclass
class DataSection:
    root: str = ""
    dilation_radius: int = 8
    halo_width: int = 16
    guidance_resolution: int = 512
    scene_name: str = ""

    def dataset_config(self, crop_mode: str) -> DatasetConfig:
        return DatasetConfig(self.dilation_radius, self.halo_width, self.guidance_resolution, crop_mode,
                             self.scene_name)


@dataclass
class OracleSection:
    factor: int = 1
    erase_targets: str = ""  # dir of per-view background images (.png or .npy)
    replace_targets: str = ""  # dir of per-view premultiplied object colours
    replace_alphas: str = ""  # dir of per-view object alphas; empty = targets are full images


@dataclass
class GuidanceSection:
    provider: str = "oracle"  # oracle | external
    command: List[str] = dc_field(default_factory=list)  # external provider process
    oracle: OracleSection = dc_field(default_factory=OracleSection)


@dataclass
class DepthSection:
    estimator: str = "none"  # none | oracle
    oracle_dir: str = ""  # dir of per-view .npy depth maps


@dataclass
class PerceptualSection:
    seed: int = 0
    channels: List[int] = dc_field(default_factory=lambda: [8, 8, 8])


@dataclass
class MetricsSection:
    provider: str = "projection"
    dim: int = 64
    seed: int = 0


@dataclass
class RunConfig:
    out: str = "out"
    prompt: str = ""
    dataset: DataSection = dc_field(default_factory=DataSection)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    guidance: GuidanceSection = dc_field(default_factory=GuidanceSection)
    depth: DepthSection = dc_field(default_factory=DepthSection)
    perceptual: PerceptualSection = dc_field(default_factory=PerceptualSection)
    metrics: MetricsSection = dc_field(default_factory=MetricsSection)
    base_dir: Optional[str] = dc_field(default=None, repr=False)

    def path(self, p: str) -> str:
        """Resolve a config-relative path."""
        if not p or os.path.isabs(p) or self.base_dir is None:
            return p
        return os.path.join(self.base_dir, p)

    @property
    def dataset_config(self) -> DatasetConfig:
        return self.dataset.dataset_config(self.train.crop_mode)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["field"] = self.field.to_dict()
        return d


_NESTED = {
    RunConfig: {"dataset": DataSection, "field": FieldConfig, "train": TrainConfig, "guidance": GuidanceSection,
                "depth": DepthSection, "perceptual": PerceptualSection, "metrics": MetricsSection},
    GuidanceSection: {"oracle": OracleSection},
}


def _build(cls, doc, where):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {}
    for key, value in doc.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, value, f"{where}.{key}" if where else key) if sub else value
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc
    _check_types(obj, where)
    return obj


def _check_types(obj, where):
    for f in dataclasses.fields(obj):
        default = f.default if f.default is not dataclasses.MISSING else None
        value = getattr(obj, f.name)
        if default is None or value is None:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{where + '.' if where else ''}{f.name}: expected {type(default).__name__}, "
                              f"got {value!r}")


def parse_config(doc: dict, base_dir: str | None = None) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    cfg.base_dir = base_dir
    if cfg.guidance.provider not in ("oracle", "external"):
        raise ConfigError(f"guidance.provider: unknown provider {cfg.guidance.provider!r}")
    if cfg.depth.estimator not in ("none", "oracle"):
        raise ConfigError(f"depth.estimator: unknown estimator {cfg.depth.estimator!r}")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(doc or {}, os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
