"""Frozen feature extractors for the content features loss.

The VGG16 extractor stops at ``relu2_2`` (the ReLU output of block 2's second
conv).  Its weights come from a blob file (see :mod:`missgan.checkpoint`)
holding ``phi/conv1_1.weight``, ``phi/conv1_1.bias``, ... ``phi/conv2_2.bias``
and the input statistics ``phi/mean`` / ``phi/std`` (3-vectors, applied to
images rescaled to [0, 1]).  :func:`export_vgg16_weights` converts a
torchvision VGG16 state dict into that file; this is an offline step.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_tensor_file, write_tensor_file
from .config import ConfigError, FeatureKind, ModelConfig

VGG_LAYERS = {
    # name: (in_channels, out_channels)
    "conv1_1": (3, 64),
    "conv1_2": (64, 64),
    "conv2_1": (64, 128),
    "conv2_2": (128, 128),
}
# torchvision ``vgg16().features`` indices of the four convs above
_TORCHVISION_INDEX = {"conv1_1": 0, "conv1_2": 2, "conv2_1": 5, "conv2_2": 7}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureWeightsError(ValueError):
    pass


class FeatureExtractor(nn.Module):
    """Base class; freezes every parameter on construction."""

    kind: FeatureKind

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)


class IdentityExtractor(FeatureExtractor):
    kind = FeatureKind.IDENTITY

    def forward(self, x):
        return x


class ToyConvExtractor(FeatureExtractor):
    """Seeded conv3x3 -> ReLU -> conv3x3 -> ReLU stack."""

    kind = FeatureKind.TOY_CONV

    def __init__(self, seed: int = 0, channels: int = 8):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
        self.freeze()

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class VGG16Relu22(FeatureExtractor):
    kind = FeatureKind.VGG16_RELU2_2

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        super().__init__()
        for name, (cin, cout) in VGG_LAYERS.items():
            conv = nn.Conv2d(cin, cout, 3, 1, 1)
            for part, shape in (("weight", (cout, cin, 3, 3)), ("bias", (cout,))):
                key = f"phi/{name}.{part}"
                if key not in tensors:
                    raise FeatureWeightsError(f"feature weights lack layer {name} ({key})")
                arr = np.asarray(tensors[key], dtype=np.float32)
                if arr.shape != shape:
                    raise FeatureWeightsError(f"layer {name}: {part} has shape {arr.shape}, expected {shape}")
                getattr(conv, part).data.copy_(torch.from_numpy(arr.copy()))
            setattr(self, name, conv)
        for key in ("mean", "std"):
            full = f"phi/{key}"
            if full not in tensors:
                raise FeatureWeightsError(f"feature weights lack {full}")
            arr = np.asarray(tensors[full], dtype=np.float32).reshape(-1)
            if arr.shape != (3,):
                raise FeatureWeightsError(f"{full} must be a 3-vector, got shape {arr.shape}")
            self.register_buffer(key, torch.from_numpy(arr.copy()).view(1, 3, 1, 1))
        if torch.any(self.std <= 0):
            raise FeatureWeightsError("phi/std must be positive")
        self.freeze()

    def forward(self, x):
        x = ((x + 1.0) * 0.5 - self.mean) / self.std
        h = F.relu(self.conv1_1(x))
        h = F.relu(self.conv1_2(h))
        h = F.max_pool2d(h, 2)
        h = F.relu(self.conv2_1(h))
        return F.relu(self.conv2_2(h))


def load_feature_weights(path: str | Path) -> VGG16Relu22:
    path = Path(path)
    if not path.is_file():
        raise FeatureWeightsError(f"feature weight file not found: {path}")
    return VGG16Relu22(read_tensor_file(path))


def export_vgg16_weights(state_dict: Mapping[str, torch.Tensor], path: str | Path,
                         mean=IMAGENET_MEAN, std=IMAGENET_STD) -> None:
    """Write the relu2_2 trunk of a torchvision VGG16 state dict as a feature weight file."""
    tensors = {}
    for name, idx in _TORCHVISION_INDEX.items():
        for part in ("weight", "bias"):
            src = state_dict[f"features.{idx}.{part}"]
            tensors[f"phi/{name}.{part}"] = np.asarray(src.detach().cpu(), dtype=np.float32)
    tensors["phi/mean"] = np.asarray(mean, dtype=np.float32)
    tensors["phi/std"] = np.asarray(std, dtype=np.float32)
    write_tensor_file(path, tensors)


def extract_features(phi: FeatureExtractor, x: torch.Tensor) -> torch.Tensor:
    return phi(x)


def build_feature_extractor(cfg: ModelConfig) -> FeatureExtractor:
    kind = cfg.phi_kind
    if kind == FeatureKind.IDENTITY:
        return IdentityExtractor().freeze()
    if kind == FeatureKind.TOY_CONV:
        return ToyConvExtractor(seed=cfg.seed)
    if not cfg.phi_weights:
        raise ConfigError("phi_weights", "a VGG16 feature weight file is required for phi_kind = 'vgg16'")
    return load_feature_weights(cfg.phi_weights)
