"""Multi-illustrator image-to-illustration translation GAN (MISS GAN) at desk scale."""
from .config import (
    ConfigError,
    FeatureKind,
    GeneratorVariant,
    LossWeights,
    ModelConfig,
    OptimSettings,
    PRESETS,
    load_config,
    preset_config,
    toy_config,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FeatureKind",
    "GeneratorVariant",
    "LossWeights",
    "ModelConfig",
    "OptimSettings",
    "PRESETS",
    "load_config",
    "preset_config",
    "toy_config",
]
