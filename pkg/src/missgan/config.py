"""Model/training configuration, ablation presets and the flat config file format.

A config file is a flat TOML document (``key = value`` lines, no tables).
An optional ``preset`` key selects one of the built-in presets first; every
other key overrides a field of the preset.  Unknown keys are rejected.

Example::

    preset = "MISSGAN"
    image_size = 32
    base_width = 16
    mapping_width = 64
    batch_size = 4
    phi_kind = "toy_conv"
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for unparsable config files and invariant violations."""

    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class GeneratorVariant(str, enum.Enum):
    STARGAN2 = "STARGAN2"
    GANILLA_PLAIN = "GANILLA_PLAIN"
    GANILLA_RES = "GANILLA_RES"


class FeatureKind(str, enum.Enum):
    VGG16_RELU2_2 = "vgg16"
    IDENTITY = "identity"
    TOY_CONV = "toy_conv"


@dataclass(frozen=True)
class LossWeights:
    lambda_sty: float = 1.0
    lambda_ds: float = 1.0
    lambda_cyc: float = 1.0
    lambda_feat: float = 1.0
    lambda_sacl: float = 0.0
    r1_gamma: float = 1.0
    ds_decay_iters: int = 100_000


@dataclass(frozen=True)
class OptimSettings:
    lr_d: float = 1e-4
    lr_g: float = 1e-4
    lr_e: float = 1e-4
    lr_f: float = 1e-6
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    weight_decay: float = 1e-4
    ema_decay: float = 0.999


@dataclass(frozen=True)
class ModelConfig:
    num_domains: int = 2
    latent_dim: int = 16
    style_dim: int = 64
    base_width: int = 64
    mapping_width: int = 512
    generator_variant: GeneratorVariant = GeneratorVariant.GANILLA_RES
    image_size: int = 128
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimSettings = field(default_factory=OptimSettings)
    phi_kind: FeatureKind = FeatureKind.VGG16_RELU2_2
    phi_weights: str = ""
    batch_size: int = 8
    prefetch: int = 0
    seed: int = 0
    preset: str = "MISSGAN"

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ModelConfig":
        """Return a copy with top-level or flattened (loss/optim) fields changed."""
        return from_flat({**to_flat(self), **changes})

    def to_dict(self) -> dict[str, Any]:
        return to_flat(self)

    def hash(self) -> str:
        return config_hash(self)


# Flat-key schema: key -> (section, type). Section None means top-level.
_SECTIONS = {"loss_weights": LossWeights, "optim": OptimSettings}
_SCHEMA: dict[str, tuple[str | None, type]] = {}
for _f in dataclasses.fields(ModelConfig):
    if _f.name in _SECTIONS:
        for _g in dataclasses.fields(_SECTIONS[_f.name]):
            _SCHEMA[_g.name] = (_f.name, _g.type)
    else:
        _SCHEMA[_f.name] = (None, _f.type)

_ENUMS = {"generator_variant": GeneratorVariant, "phi_kind": FeatureKind}


def validate(cfg: ModelConfig) -> None:
    if cfg.num_domains < 2:
        raise ConfigError("num_domains", f"must be >= 2, got {cfg.num_domains}")
    if cfg.base_width < 4:
        raise ConfigError("base_width", f"must be >= 4, got {cfg.base_width}")
    if cfg.image_size % 16 != 0 or cfg.image_size < 16:
        raise ConfigError("image_size", f"{cfg.image_size} not divisible by 16")
    if cfg.image_size & (cfg.image_size - 1):
        # discriminator/style-encoder depth is log2(image_size) - 2
        raise ConfigError("image_size", f"{cfg.image_size} must be a power of two")
    for key in ("latent_dim", "style_dim", "mapping_width", "batch_size"):
        if getattr(cfg, key) < 1:
            raise ConfigError(key, f"must be >= 1, got {getattr(cfg, key)}")
    if cfg.prefetch < 0:
        raise ConfigError("prefetch", "must be >= 0")
    for f in dataclasses.fields(LossWeights):
        if getattr(cfg.loss_weights, f.name) < 0:
            raise ConfigError(f.name, "must be non-negative")
    if cfg.loss_weights.ds_decay_iters < 1:
        raise ConfigError("ds_decay_iters", "must be >= 1")
    o = cfg.optim
    for key in ("lr_d", "lr_g", "lr_e", "lr_f"):
        if getattr(o, key) <= 0:
            raise ConfigError(key, "learning rate must be > 0")
    for key in ("adam_beta1", "adam_beta2", "ema_decay"):
        if not 0.0 <= getattr(o, key) <= 1.0:
            raise ConfigError(key, "must lie in [0, 1]")
    if o.weight_decay < 0:
        raise ConfigError("weight_decay", "must be non-negative")


def to_flat(cfg: ModelConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, (section, _) in _SCHEMA.items():
        value = getattr(getattr(cfg, section), key) if section else getattr(cfg, key)
        out[key] = value.value if isinstance(value, enum.Enum) else value
    return out


def _coerce(key: str, value: Any) -> Any:
    if key not in _SCHEMA:
        raise ConfigError(key, "unknown config key")
    _, typ = _SCHEMA[key]
    if key in _ENUMS:
        enum_cls = _ENUMS[key]
        try:
            return enum_cls(value) if not isinstance(value, str) else _enum_lookup(enum_cls, value)
        except ValueError:
            allowed = ", ".join(m.value for m in enum_cls)
            raise ConfigError(key, f"invalid value {value!r} (allowed: {allowed})") from None
    typ_name = typ if isinstance(typ, str) else typ.__name__
    if typ_name == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected int, got {value!r}")
        return value
    if typ_name == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected float, got {value!r}")
        return float(value)
    if typ_name == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported type {typ_name}")


def _enum_lookup(enum_cls, value: str):
    for m in enum_cls:
        if value.upper() == m.name or value.lower() == m.value.lower():
            return m
    raise ValueError(value)


def from_flat(values: dict[str, Any]) -> ModelConfig:
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        value = _coerce(key, value)
        section = _SCHEMA[key][0]
        (sections[section] if section else top)[key] = value
    loss = LossWeights(**sections["loss_weights"])
    optim = OptimSettings(**sections["optim"])
    return ModelConfig(loss_weights=loss, optim=optim, **top)


# Built-in ablation presets.  Each one fixes the generator variant and which
# content losses are active; every other field keeps its default.
PRESETS: dict[str, dict[str, Any]] = {
    "A": {"generator_variant": "STARGAN2", "lambda_feat": 0.0, "lambda_sacl": 0.0},
    "B": {"generator_variant": "GANILLA_PLAIN", "lambda_feat": 0.0, "lambda_sacl": 0.0},
    "C": {"generator_variant": "GANILLA_RES", "lambda_feat": 0.0, "lambda_sacl": 0.0},
    "D": {"generator_variant": "GANILLA_RES", "lambda_feat": 0.0, "lambda_sacl": 1.0},
    "E": {"generator_variant": "GANILLA_RES", "lambda_feat": 1.0, "lambda_sacl": 1.0},
    "MISSGAN": {"generator_variant": "GANILLA_RES", "lambda_feat": 1.0, "lambda_sacl": 0.0},
}


def _preset_name(name: str) -> str:
    key = name.strip().upper().replace(" ", "").replace("_", "")
    if key not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r} (allowed: {', '.join(PRESETS)})")
    return key


def preset_config(name: str, **overrides) -> ModelConfig:
    """Build the config of a named preset, optionally overriding fields."""
    key = _preset_name(name)
    values = {**PRESETS[key], **overrides}
    return from_flat({"preset": key, **values})


def parse_config(text: str, source: str = "<string>") -> ModelConfig:
    try:
        values = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(None, f"cannot parse {source}: {exc}") from None
    for key, value in values.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(key, "nested values are not allowed in the flat config format")
    if "preset" in values:
        if not isinstance(values["preset"], str):
            raise ConfigError("preset", "expected string")
        name = _preset_name(values.pop("preset"))
        return from_flat({"preset": name, **PRESETS[name], **values})
    return from_flat(values)


def load_config(path: str | Path) -> ModelConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(None, f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def dump_config(cfg: ModelConfig) -> str:
    """Serialize to the flat text format; ``parse_config(dump_config(c)) == c``."""
    lines = []
    for key, value in to_flat(cfg).items():
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(to_flat(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def toy_config(preset: str = "MISSGAN", **overrides) -> ModelConfig:
    """Desk-scale config used by tests and the smoke experiment."""
    values = dict(
        image_size=32,
        base_width=16,
        mapping_width=64,
        batch_size=4,
        phi_kind="toy_conv",
    )
    values.update(overrides)
    return preset_config(preset, **values)
