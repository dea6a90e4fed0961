"""Experiment configuration: one YAML/JSON file, validated up front."""
from __future__ import annotations

import os
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .poison import PoisonSpec
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, field_name, msg):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    train_size: int = 2000
    test_size: int = 300
    num_classes: int = 3
    image_size: int = 64
    voc_root: str | None = None
    voc_classes: list[str] | None = None
    voc_train_split: str = "trainval"
    voc_test_split: str = "test"


@dataclass
class DefenseConfig:
    overlays: int = 100
    blend: float = 0.5
    images: int = 40
    conf_threshold: float = 0.5
    empty_policy: str = "max"
    gradcam_images: int = 4
    gradcam_layer: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/exp"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    oma_strict: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def substream_seed(root: int, name: str) -> int:
    """Independent, named seed derived from the root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(name.encode())]).generate_state(1)[0])


def _section(cls, raw, prefix):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{prefix}.{k}", "unknown option")
    types = {f.name: f.type for f in fields(cls)}
    for k, v in raw.items():
        _check_value(f"{prefix}.{k}", types[k], v)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        msg = str(e)
        name = msg.split(":", 1)[0] if ":" in msg else "?"
        if name in known:
            raise ConfigError(f"{prefix}.{name}", msg.split(":", 1)[1].strip()) from e
        raise ConfigError(prefix, msg) from e


def _check_value(name, t, v):
    t = t if isinstance(t, str) else getattr(t, "__name__", "")
    if v is None:
        if "None" not in t:
            raise ConfigError(name, "must not be null")
        return
    if t.startswith("int") and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    if t.startswith("float") and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise ConfigError(name, f"expected a number, got {v!r}")
    if t.startswith("str") and not isinstance(v, str):
        raise ConfigError(name, f"expected a string, got {v!r}")
    if t.startswith("bool") and not isinstance(v, bool):
        raise ConfigError(name, f"expected true/false, got {v!r}")
    if t.startswith("list") and not (isinstance(v, list) and all(isinstance(i, str) for i in v)):
        raise ConfigError(name, f"expected a list of strings, got {v!r}")


def _check_types(obj, prefix):
    for f in fields(obj):
        _check_value(f"{prefix}.{f.name}", f.type, getattr(obj, f.name))


def parse_config(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    top = {"seed", "out", "dataset", "poison", "train", "defense", "oma_strict"}
    for k in raw:
        if k not in top:
            raise ConfigError(k, "unknown option")
    for k in ("dataset", "poison", "train", "defense"):
        if raw.get(k) is not None and not isinstance(raw[k], dict):
            raise ConfigError(k, "must be a mapping")
    poison_raw = raw.get("poison") or {}
    # cross-field check: OGA size options only make sense for OGA
    scen = str(poison_raw.get("scenario", "oda")).lower()
    for k in ("oga_min_frac", "oga_max_frac", "oga_triggers"):
        if k in poison_raw and scen != "oga":
            raise ConfigError(f"poison.{k}", f"only valid for scenario oga, not {scen}")
    if "global_trigger_prob" in poison_raw and scen != "oma":
        raise ConfigError("poison.global_trigger_prob", f"only valid for scenario oma, not {scen}")
    cfg = ExperimentConfig(
        seed=raw.get("seed", 0),
        out=raw.get("out", "runs/exp"),
        dataset=_section(DatasetConfig, raw.get("dataset"), "dataset"),
        poison=_section(PoisonSpec, poison_raw, "poison"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        defense=_section(DefenseConfig, raw.get("defense"), "defense"),
        oma_strict=raw.get("oma_strict", True),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", f"expected a non-negative integer, got {cfg.seed!r}")
    if not isinstance(cfg.out, str) or not cfg.out:
        raise ConfigError("out", "expected a directory path")
    if not isinstance(cfg.oma_strict, bool):
        raise ConfigError("oma_strict", "expected true/false")
    _check_types(cfg.dataset, "dataset")
    _check_types(cfg.poison, "poison")
    _check_types(cfg.train, "train")
    _check_types(cfg.defense, "defense")
    d = cfg.dataset
    if d.source not in ("synthetic", "voc"):
        raise ConfigError("dataset.source", "must be 'synthetic' or 'voc'")
    if d.train_size < 1:
        raise ConfigError("dataset.train_size", "must be >= 1")
    if d.test_size < 1:
        raise ConfigError("dataset.test_size", "must be >= 1")
    if d.image_size < 16 or d.image_size % 8:
        raise ConfigError("dataset.image_size", "must be a multiple of 8 and >= 16")
    if d.source == "synthetic" and not 2 <= d.num_classes <= 5:
        raise ConfigError("dataset.num_classes", "synthetic data supports 2..5 classes")
    if d.source == "voc":
        if not d.voc_root or not os.path.isdir(d.voc_root):
            raise ConfigError("dataset.voc_root", f"directory not found: {d.voc_root!r}")
        if not d.voc_classes:
            raise ConfigError("dataset.voc_classes", "required for VOC data")
        if len(d.voc_classes) != d.num_classes:
            raise ConfigError("dataset.num_classes", "must equal the number of voc_classes")
    if cfg.poison.target_class >= d.num_classes:
        raise ConfigError("poison.target_class", f"must be < dataset.num_classes ({d.num_classes})")
    if cfg.train.num_classes != d.num_classes:
        cfg.train.num_classes = d.num_classes
    if cfg.train.image_size != d.image_size:
        cfg.train.image_size = d.image_size
    df = cfg.defense
    if df.overlays < 1:
        raise ConfigError("defense.overlays", "must be >= 1")
    if not 0.0 <= df.blend <= 1.0:
        raise ConfigError("defense.blend", "must lie in [0, 1]")
    if df.images < 1:
        raise ConfigError("defense.images", "must be >= 1")
    if df.gradcam_images < 1:
        raise ConfigError("defense.gradcam_images", "must be >= 1")
    if df.empty_policy not in ("max", "drop"):
        raise ConfigError("defense.empty_policy", "must be 'max' or 'drop'")
    if not 0.0 <= df.conf_threshold <= 1.0:
        raise ConfigError("defense.conf_threshold", "must lie in [0, 1]")


def read_raw_config(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError("--config", f"file not found: {path}")
    with open(path) as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError("--config", f"not valid YAML/JSON: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("--config", "top level must be a mapping")
    return raw


def load_config(path) -> ExperimentConfig:
    return parse_config(read_raw_config(path))
