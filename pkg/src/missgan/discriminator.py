from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import check_domain, downsampling_backbone, he_init
from .config import ModelConfig


class Discriminator(nn.Module):
    """Shared downsampling backbone to 4x4, a 4x4 conv, then one logit per domain.

    The final 1x1 conv holds one output row per domain; row ``k`` is the
    parameter set dedicated to domain ``k``.
    """

    def __init__(self, image_size=128, num_domains=2, base_width=64):
        super().__init__()
        self.num_domains = num_domains
        self.backbone, dim = downsampling_backbone(base_width, image_size)
        self.conv4x4 = nn.Conv2d(dim, dim, 4, 1, 0)
        self.out = nn.Conv2d(dim, num_domains, 1, 1, 0)

    def logits(self, x):
        h = F.leaky_relu(self.backbone(x), 0.2)
        h = F.leaky_relu(self.conv4x4(h), 0.2)
        if h.shape[2:] != (1, 1):
            raise ValueError(f"input size {tuple(x.shape[2:])} does not match the discriminator resolution")
        return self.out(h).flatten(1)  # N x K

    def forward(self, x, y):
        y = check_domain(y, self.num_domains).to(x.device)
        out = self.logits(x)
        return out[torch.arange(y.shape[0], device=x.device), y]


def build_discriminator(cfg: ModelConfig) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 3)
        net = Discriminator(cfg.image_size, cfg.num_domains, cfg.base_width)
        he_init(net)
    return net


def discriminate(net: Discriminator, x, y):
    return net(x, y)
