"""Residual blocks in the style of the StarGAN v2 reference networks."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nnops import AdaIN, InstanceNorm, upsample_nearest


def he_init(module: nn.Module, skip=()) -> None:
    """Kaiming-normal (fan-in) weights and zero biases for conv/linear layers not in ``skip``."""
    skip = {id(m) for m in skip}
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and id(m) not in skip:
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResBlk(nn.Module):
    """Pre-activation residual block; optional instance norm and 2x average-pool downsampling."""

    def __init__(self, dim_in, dim_out, normalize=False, downsample=False):
        super().__init__()
        self.normalize = normalize
        self.downsample = downsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_in, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        if normalize:
            self.norm1 = InstanceNorm(dim_in, affine=True)
            self.norm2 = InstanceNorm(dim_in, affine=True)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.learned_sc:
            x = self.conv1x1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        return x

    def _residual(self, x):
        if self.normalize:
            x = self.norm1(x)
        x = F.leaky_relu(x, 0.2)
        x = self.conv1(x)
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.normalize:
            x = self.norm2(x)
        x = F.leaky_relu(x, 0.2)
        return self.conv2(x)

    def forward(self, x):
        return (self._shortcut(x) + self._residual(x)) / math.sqrt(2)


class AdainResBlk(nn.Module):
    def __init__(self, dim_in, dim_out, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.learned_sc = dim_in != dim_out
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_in)
        self.norm2 = AdaIN(style_dim, dim_out)
        if self.learned_sc:
            self.conv1x1 = nn.Conv2d(dim_in, dim_out, 1, 1, 0, bias=False)

    def _shortcut(self, x):
        if self.upsample:
            x = upsample_nearest(x, 2)
        if self.learned_sc:
            x = self.conv1x1(x)
        return x

    def _residual(self, x, s):
        x = F.leaky_relu(self.norm1(x, s), 0.2)
        if self.upsample:
            x = upsample_nearest(x, 2)
        x = self.conv1(x)
        x = F.leaky_relu(self.norm2(x, s), 0.2)
        return self.conv2(x)

    def forward(self, x, s):
        return (self._shortcut(x) + self._residual(x, s)) / math.sqrt(2)


def downsampling_backbone(base_width: int, image_size: int) -> tuple[nn.Sequential, int]:
    """Conv stem plus log2(image_size) - 2 downsampling ResBlks ending at 4x4.

    Returns the backbone and its output channel count.
    """
    n_blocks = int(math.log2(image_size)) - 2
    max_width = 8 * base_width
    layers: list[nn.Module] = [nn.Conv2d(3, base_width, 3, 1, 1)]
    dim_in = base_width
    for _ in range(n_blocks):
        dim_out = min(dim_in * 2, max_width)
        layers.append(ResBlk(dim_in, dim_out, downsample=True))
        dim_in = dim_out
    return nn.Sequential(*layers), dim_in


def check_domain(y: torch.Tensor, num_domains: int) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    if y.dim() != 1:
        raise ValueError(f"domain labels must be a 1-D tensor, got shape {tuple(y.shape)}")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= num_domains):
        raise ValueError(f"domain index out of range [0, {num_domains}): {y.tolist()}")
    return y
