"""Style-code producers: the mapping network (latent -> style) and the style encoder (image -> style)."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import check_domain, downsampling_backbone, he_init
from .config import ModelConfig


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim=16, style_dim=64, num_domains=2, width=512):
        super().__init__()
        self.latent_dim = latent_dim
        self.num_domains = num_domains
        shared = [nn.Linear(latent_dim, width), nn.ReLU()]
        for _ in range(3):
            shared += [nn.Linear(width, width), nn.ReLU()]
        self.shared = nn.Sequential(*shared)
        heads = []
        for _ in range(num_domains):
            layers = []
            for _ in range(3):
                layers += [nn.Linear(width, width), nn.ReLU()]
            layers.append(nn.Linear(width, style_dim))
            heads.append(nn.Sequential(*layers))
        self.heads = nn.ModuleList(heads)

    def forward(self, z, y):
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent code shape {tuple(z.shape)} != (N, {self.latent_dim})")
        y = check_domain(y, self.num_domains).to(z.device)
        h = self.shared(z)
        out = torch.stack([head(h) for head in self.heads], dim=1)  # N x K x D_s
        return out[torch.arange(y.shape[0], device=z.device), y]


class StyleEncoder(nn.Module):
    """Unnormalized downsampling ResBlks to 4x4, global average pooling, per-domain linear heads."""

    def __init__(self, image_size=128, style_dim=64, num_domains=2, base_width=64):
        super().__init__()
        self.num_domains = num_domains
        self.backbone, dim = downsampling_backbone(base_width, image_size)
        self.heads = nn.ModuleList(nn.Linear(dim, style_dim) for _ in range(num_domains))

    def forward(self, x, y):
        y = check_domain(y, self.num_domains).to(x.device)
        h = self.backbone(x)
        h = F.leaky_relu(h, 0.2).mean(dim=(2, 3))
        out = torch.stack([head(h) for head in self.heads], dim=1)
        return out[torch.arange(y.shape[0], device=x.device), y]


def build_mapping_network(cfg: ModelConfig) -> MappingNetwork:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 1)
        net = MappingNetwork(cfg.latent_dim, cfg.style_dim, cfg.num_domains, cfg.mapping_width)
        he_init(net)
    return net


def build_style_encoder(cfg: ModelConfig) -> StyleEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 2)
        net = StyleEncoder(cfg.image_size, cfg.style_dim, cfg.num_domains, cfg.base_width)
        he_init(net)
    return net


def mapping_forward(net: MappingNetwork, z, y):
    return net(z, y)


def style_encode(net: StyleEncoder, x, y):
    return net(x, y)
