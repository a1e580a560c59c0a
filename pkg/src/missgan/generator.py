"""Generator variants.

``GanillaGenerator`` covers both GANILLA-style variants: a ResNet-like
encoder (7x7 stem, max-pool, four layers of two residual blocks) whose three
shallower layers feed skip connections into a three-stage AdaIN decoder.
With ``residual_decoder=True`` each decoder stage is a residual block with an
upsampled shortcut (MISS GAN, ablation models C-E); otherwise each stage is a
plain upsample/conv/AdaIN/ReLU stack (ablation model B).

``StarGAN2Generator`` is the baseline (ablation model A) with no skips.

Spatial schedule for an H x W input, base width w::

    stem+pool  H/2   w
    layer1     H/2   w    -> skip
    layer2     H/4   2w   -> skip
    layer3     H/8   4w   -> skip
    layer4     H/16  8w   (deepest)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import AdainResBlk, ResBlk, he_init
from .config import GeneratorVariant, ModelConfig
from .nnops import AdaIN, InstanceNorm, upsample_nearest

log = logging.getLogger(__name__)


@dataclass
class EncoderOutput:
    deepest: torch.Tensor
    skips: tuple[torch.Tensor, ...]  # shallow to deep: (H/2, w), (H/4, 2w), (H/8, 4w)


def _check_input(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected an N x 3 x H x W image batch, got shape {tuple(x.shape)}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} not divisible by 16")


class EncoderBlock(nn.Module):
    """conv3x3 -> IN -> ReLU -> conv3x3 -> IN, 1x1 conv shortcut on shape change, ReLU after the sum."""

    def __init__(self, dim_in, dim_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, stride, 1)
        self.norm1 = InstanceNorm(dim_out, affine=True)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm2 = InstanceNorm(dim_out, affine=True)
        if stride != 1 or dim_in != dim_out:
            self.shortcut = nn.Conv2d(dim_in, dim_out, 1, stride, 0)
        else:
            self.shortcut = None

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        sc = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + sc)


class GanillaEncoder(nn.Module):
    def __init__(self, base_width: int):
        super().__init__()
        w = base_width
        self.stem = nn.Conv2d(3, w, 7, 1, 3)
        self.stem_norm = InstanceNorm(w, affine=True)
        widths = (w, 2 * w, 4 * w, 8 * w)
        layers = []
        dim_in = w
        for i, dim_out in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers.append(nn.Sequential(EncoderBlock(dim_in, dim_out, stride), EncoderBlock(dim_out, dim_out)))
            dim_in = dim_out
        self.layers = nn.ModuleList(layers)

    def forward(self, x) -> EncoderOutput:
        h = F.relu(self.stem_norm(self.stem(x)))
        h = F.max_pool2d(h, 3, 2, 1)
        feats = []
        for layer in self.layers:
            h = layer(h)
            feats.append(h)
        return EncoderOutput(deepest=feats[3], skips=tuple(feats[:3]))


class ResidualDecoderBlock(nn.Module):
    """Residual branch conv/AdaIN/ReLU/upsample/conv/AdaIN/ReLU plus an upsampled shortcut."""

    def __init__(self, dim_in, dim_out, style_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.norm1 = AdaIN(style_dim, dim_out)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, 1, 1)
        self.norm2 = AdaIN(style_dim, dim_out)
        self.shortcut = nn.Conv2d(dim_in, dim_out, 1, 1, 0) if dim_in != dim_out else None

    def branch(self, x, s):
        h = F.relu(self.norm1(self.conv1(x), s))
        h = upsample_nearest(h, 2)
        return F.relu(self.norm2(self.conv2(h), s))

    def skip_path(self, x):
        x = upsample_nearest(x, 2)
        return x if self.shortcut is None else self.shortcut(x)

    def forward(self, x, s):
        return self.branch(x, s) + self.skip_path(x)


class PlainDecoderBlock(nn.Module):
    def __init__(self, dim_in, dim_out, style_dim):
        super().__init__()
        self.conv = nn.Conv2d(dim_in, dim_out, 3, 1, 1)
        self.norm = AdaIN(style_dim, dim_out)

    def forward(self, x, s):
        return F.relu(self.norm(self.conv(upsample_nearest(x, 2)), s))


class GanillaDecoder(nn.Module):
    def __init__(self, base_width: int, style_dim: int, residual: bool):
        super().__init__()
        w = base_width
        block = ResidualDecoderBlock if residual else PlainDecoderBlock
        dims = [(8 * w, 4 * w), (4 * w, 2 * w), (2 * w, w)]
        self.blocks = nn.ModuleList(block(a, b, style_dim) for a, b in dims)
        # skip projections, applied deepest first to match the decoder order
        self.skip_proj = nn.ModuleList(nn.Conv2d(c, c, 1, 1, 0) for c in (4 * w, 2 * w, w))
        self.to_rgb = nn.Conv2d(w, 3, 3, 1, 1)

    def forward(self, e: EncoderOutput, s: torch.Tensor) -> torch.Tensor:
        h = e.deepest
        skips = e.skips[::-1]
        if len(skips) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} encoder skips, got {len(skips)}")
        for block, proj, skip in zip(self.blocks, self.skip_proj, skips):
            h = block(h, s)
            if h.shape[1:] != skip.shape[1:] or h.shape[0] != skip.shape[0]:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match decoder state {tuple(h.shape)}")
            h = h + proj(skip)
        return self.to_rgb(upsample_nearest(h, 2))


class GanillaGenerator(nn.Module):
    def __init__(self, base_width=64, style_dim=64, residual_decoder=True):
        super().__init__()
        self.variant = GeneratorVariant.GANILLA_RES if residual_decoder else GeneratorVariant.GANILLA_PLAIN
        self.style_dim = style_dim
        self.encoder = GanillaEncoder(base_width)
        self.decoder = GanillaDecoder(base_width, style_dim, residual_decoder)

    def encode(self, x) -> EncoderOutput:
        _check_input(x)
        return self.encoder(x)

    def decode(self, e: EncoderOutput, s) -> torch.Tensor:
        if s.dim() != 2 or s.shape[1] != self.style_dim:
            raise ValueError(f"style code shape {tuple(s.shape)} != (N, {self.style_dim})")
        return self.decoder(e, s)

    def forward(self, x, s):
        return self.decode(self.encode(x), s)


class StarGAN2Generator(nn.Module):
    """Baseline generator: 4 IN down blocks, 2 IN + 2 AdaIN bottleneck blocks, 4 AdaIN up blocks."""

    def __init__(self, base_width=64, style_dim=64):
        super().__init__()
        self.variant = GeneratorVariant.STARGAN2
        self.style_dim = style_dim
        w = base_width
        max_width = 8 * w
        self.from_rgb = nn.Conv2d(3, w, 3, 1, 1)
        down, up = [], []
        dim_in = w
        for _ in range(4):
            dim_out = min(dim_in * 2, max_width)
            down.append(ResBlk(dim_in, dim_out, normalize=True, downsample=True))
            up.insert(0, AdainResBlk(dim_out, dim_in, style_dim, upsample=True))
            dim_in = dim_out
        self.down = nn.ModuleList(down)
        self.bottleneck_in = nn.ModuleList(ResBlk(dim_in, dim_in, normalize=True) for _ in range(2))
        self.bottleneck_adain = nn.ModuleList(AdainResBlk(dim_in, dim_in, style_dim) for _ in range(2))
        self.up = nn.ModuleList(up)
        self.to_rgb_norm = InstanceNorm(w, affine=True)
        self.to_rgb = nn.Conv2d(w, 3, 1, 1, 0)

    def encode(self, x) -> EncoderOutput:
        _check_input(x)
        h = self.from_rgb(x)
        for block in self.down:
            h = block(h)
        for block in self.bottleneck_in:
            h = block(h)
        return EncoderOutput(deepest=h, skips=())

    def decode(self, e: EncoderOutput, s) -> torch.Tensor:
        if s.dim() != 2 or s.shape[1] != self.style_dim:
            raise ValueError(f"style code shape {tuple(s.shape)} != (N, {self.style_dim})")
        h = e.deepest
        for block in self.bottleneck_adain:
            h = block(h, s)
        for block in self.up:
            h = block(h, s)
        return self.to_rgb(F.leaky_relu(self.to_rgb_norm(h), 0.2))

    def forward(self, x, s):
        return self.decode(self.encode(x), s)


ADAIN_INIT_STD = 0.02


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_generator(cfg: ModelConfig) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.generator_variant == GeneratorVariant.STARGAN2:
            net = StarGAN2Generator(cfg.base_width, cfg.style_dim)
        else:
            net = GanillaGenerator(
                cfg.base_width,
                cfg.style_dim,
                residual_decoder=cfg.generator_variant == GeneratorVariant.GANILLA_RES,
            )
        # the RGB head keeps torch's default (smaller) init so initial outputs stay near image range
        he_init(net, skip=[net.to_rgb] if isinstance(net, StarGAN2Generator) else [net.decoder.to_rgb])
        # style projections start close to zero, i.e. AdaIN close to plain instance norm
        for m in net.modules():
            if isinstance(m, AdaIN):
                nn.init.normal_(m.fc.weight, std=ADAIN_INIT_STD)
                nn.init.zeros_(m.fc.bias)
    log.info("generator %s: %d parameters", net.variant.value, count_parameters(net))
    return net


def generator_forward(generator: nn.Module, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return generator(x, s)
