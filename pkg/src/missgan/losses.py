"""Training objectives.

All norms are element-count-normalized means so magnitudes do not depend on
resolution.  The generator objective is::

    adv_g + l_sty*sty - l_ds*ds + l_cyc*cyc + l_feat*feat + l_sacl*sacl

and the discriminator objective is ``adv_d + r1``.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import torch
import torch.nn.functional as F

from .config import LossWeights


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_adv_d(real_logit, fake_logit):
    return F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()


def loss_adv_g(fake_logit):
    return F.softplus(-fake_logit).mean()


def r1_penalty(real_logit, real_images, weight=1.0):
    """(weight / 2) * batch mean of |d real_logit / d real_images|^2.

    ``real_images`` must have been part of the graph that produced
    ``real_logit`` with ``requires_grad=True``.
    """
    (grad,) = torch.autograd.grad(real_logit.sum(), real_images, create_graph=True)
    sq = grad.pow(2).flatten(1).sum(dim=1)
    return 0.5 * weight * sq.mean()


def loss_sty(s_target, s_recovered):
    _check_shapes(s_target, s_recovered, "loss_sty")
    return (s_target - s_recovered).abs().mean()


def loss_ds(img_a, img_b):
    _check_shapes(img_a, img_b, "loss_ds")
    return (img_a - img_b).abs().mean()


def loss_cyc(x, x_reconstructed):
    _check_shapes(x, x_reconstructed, "loss_cyc")
    return (x - x_reconstructed).abs().mean()


def loss_content_feat(phi, x, y_x):
    _check_shapes(x, y_x, "loss_content_feat")
    return (phi(x) - phi(y_x)).abs().mean()


def loss_sacl(enc_x, enc_yx, d):
    _check_shapes(enc_x, enc_yx, "loss_sacl")
    if d < 1:
        raise ValueError("d must be >= 1")
    return (enc_x - enc_yx).pow(2).mean() / d


@dataclass
class LossReport:
    adv_d: float = 0.0
    adv_g: float = 0.0
    r1: float = 0.0
    sty: float = 0.0
    ds: float = 0.0
    cyc: float = 0.0
    feat: float = 0.0
    sacl: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(astuple(self))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.header(), self.row()))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.row())

    @classmethod
    def mean(cls, reports) -> "LossReport":
        reports = list(reports)
        return cls(*[sum(vals) / len(reports) for vals in zip(*(r.row() for r in reports))])


def _require_finite(terms: dict):
    for name, value in terms.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite loss term {name} = {v}", report=_floats(terms))


def _floats(terms):
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}


def generator_objective(terms: dict, weights: LossWeights, lambda_ds: float | None = None):
    """Combine generator-side terms (``adv_g, sty, ds, cyc`` and optional ``feat, sacl``).

    ``lambda_ds`` overrides ``weights.lambda_ds`` (the decayed value during training).
    A term whose weight is 0 contributes exactly 0 and may be omitted.
    """
    _require_finite(terms)
    l_ds = weights.lambda_ds if lambda_ds is None else lambda_ds
    total = terms["adv_g"]
    for name, w, sign in (
        ("sty", weights.lambda_sty, 1.0),
        ("ds", l_ds, -1.0),
        ("cyc", weights.lambda_cyc, 1.0),
        ("feat", weights.lambda_feat, 1.0),
        ("sacl", weights.lambda_sacl, 1.0),
    ):
        if w == 0 or name not in terms:
            continue
        total = total + sign * w * terms[name]
    return total


def discriminator_objective(terms: dict, weights: LossWeights | None = None):
    """``adv_d + r1``; ``r1`` is expected to already carry its gamma weight."""
    _require_finite(terms)
    return terms["adv_d"] + terms.get("r1", 0.0)
