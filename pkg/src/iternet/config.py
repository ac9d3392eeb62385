"""Flat `section.key = value` run configuration.

Every field has a default, so an empty file is a valid config; unknown
keys are rejected so typos cannot silently fall back to defaults.
parse(serialize(cfg)) round-trips to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .model import IterNetConfig, UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    """in_channels 3 | base_depth 3 | base_channels 8 | mini_depth 2 |
    mini_channels 4 | iterations 4 | skip_connections true |
    full_size_refinery false"""

    in_channels: int = 3
    base_depth: int = 3
    base_channels: int = 8
    mini_depth: int = 2
    mini_channels: int = 4
    iterations: int = 4
    skip_connections: bool = True
    full_size_refinery: bool = False


@dataclass
class TrainSection:
    """steps 2000 | batch_size 4 | patch_size 32 | learning_rate 0.001 |
    seed 0 | checkpoint_interval 500 | flip_prob 0.5 |
    rotation_degrees 20 | brightness_range 0.8,1.2 | gamma_range 0.7,1.4 |
    color_shift 0.05 | affine false"""

    steps: int = 2000
    batch_size: int = 4
    patch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 500
    flip_prob: float = 0.5
    rotation_degrees: float = 20.0
    brightness_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.7, 1.4)
    color_shift: float = 0.05
    affine: bool = False


@dataclass
class PredictSection:
    """mode patched | stride 3 | batch_size 16 (patch size comes from
    train.patch_size)"""

    mode: str = "patched"
    stride: int = 3
    batch_size: int = 16


@dataclass
class EvalSection:
    """alpha 0.05 | with_mask true | threshold 0.5"""

    alpha: float = 0.05
    with_mask: bool = True
    threshold: float = 0.5


@dataclass
class DataSection:
    """dir '' (corpus location) | synth_count 30 | synth_train 20 |
    synth_height 128 | synth_width 128"""

    dir: str = ""
    synth_count: int = 30
    synth_train: int = 20
    synth_height: int = 128
    synth_width: int = 128


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    predict: PredictSection = field(default_factory=PredictSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)

    def model_config(self):
        m = self.model
        return IterNetConfig(
            base=UNetConfig(m.base_depth, m.base_channels, m.in_channels),
            mini=UNetConfig(m.mini_depth, m.mini_channels, m.mini_channels),
            iterations=m.iterations,
            skip_connections=m.skip_connections,
            full_size_refinery=m.full_size_refinery)


_SECTIONS = ("model", "train", "predict", "eval", "data")


def _parse_value(text, kind, key):
    t = text.strip()
    try:
        if kind is bool:
            low = t.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {t!r}")
        if kind is int:
            return int(t)
        if kind is float:
            return float(t)
        if kind is tuple:
            parts = [p for p in t.split(",") if p.strip()]
            if len(parts) != 2:
                raise ValueError(f"expected 'low,high', got {t!r}")
            return (float(parts[0]), float(parts[1]))
        return t
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def parse_config(text):
    """Parse `section.key = value` lines ('#' comments, blanks allowed)."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        section, name = key.split(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown config section {section!r}")
        target = getattr(cfg, section)
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        # every field has a typed default; the default's type drives parsing
        setattr(target, name, _parse_value(value, type(getattr(target, name)), key))
    _validate(cfg)
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return f"{value[0]!r},{value[1]!r}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg):
    lines = []
    for section in _SECTIONS:
        target = getattr(cfg, section)
        for f in fields(target):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(target, f.name))}")
    return "\n".join(lines) + "\n"


def _validate(cfg):
    if cfg.predict.mode not in ("patched", "whole"):
        raise ConfigError(
            f"predict.mode must be 'patched' or 'whole', got {cfg.predict.mode!r}")
    for key, val in (("train.steps", cfg.train.steps),
                     ("train.batch_size", cfg.train.batch_size - 1),
                     ("train.patch_size", cfg.train.patch_size - 1),
                     ("predict.stride", cfg.predict.stride - 1),
                     ("model.iterations", cfg.model.iterations - 1)):
        if val < 0:
            raise ConfigError(f"{key} must be positive")
    if not 0.0 < cfg.eval.alpha:
        raise ConfigError("eval.alpha must be positive")
