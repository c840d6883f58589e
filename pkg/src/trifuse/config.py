"""Declarative run configs: versioned YAML, strict about unknown keys."""

import dataclasses
import os
from dataclasses import dataclass

import yaml

from .augment import AugmentConfig
from .net import NetworkConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
DATA_ROOT_ENV = "TRIFUSE_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "kitti_road"  # kitti_road | cityscapes
    root: str = ""
    split: str = "training"
    threed_dir: str | None = None
    resize: tuple | None = None  # (W, H)
    holdout: int = 1
    split_seed: int = 0
    cities: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("kitti_road", "cityscapes"):
            raise ValueError(f"kind must be kitti_road or cityscapes, got {self.kind!r}")
        if self.holdout < 0:
            raise ValueError(f"holdout must be >= 0, got {self.holdout}")


@dataclass
class RunConfig:
    schema_version: int
    model: NetworkConfig
    train: TrainConfig
    data: DataConfig


_TUPLE_FIELDS = {"cyc_bounds", "spatial_channels", "crop_size", "resize", "cities",
                 "long_range", "lat_range"}


def _build_section(cls, mapping, section):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - fields
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in section '{section}'")
    kwargs = {}
    for key, value in mapping.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if cls is TrainConfig and isinstance(kwargs.get("augment"), dict):
        kwargs["augment"] = _build_section(AugmentConfig, kwargs["augment"], f"{section}.augment")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section '{section}': {exc}") from exc


def load_run_config(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {"model", "train", "data"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level key '{sorted(unknown)[0]}'")
    data = _build_section(DataConfig, doc.get("data"), "data")
    train_doc = doc.get("train") or {}
    if isinstance(train_doc, dict) and "minibatch" not in train_doc:
        # dataset-conditional default: two images for Cityscapes, four for road
        train_doc = dict(train_doc, minibatch=4 if data.kind == "kitti_road" else 2)
    cfg = RunConfig(
        schema_version=version,
        model=_build_section(NetworkConfig, doc.get("model"), "model"),
        train=_build_section(TrainConfig, train_doc, "train"),
        data=data,
    )
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        cfg.data.root = env_root
    return cfg


def run_config_to_dict(cfg):
    return {
        "schema_version": cfg.schema_version,
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "data": dataclasses.asdict(cfg.data),
    }
