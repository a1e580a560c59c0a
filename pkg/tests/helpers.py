"""Independent oracles and a finite-difference gradient checker used across the suite."""
from __future__ import annotations

import numpy as np
import torch

from missgan.config import toy_config
from missgan.losses import loss_adv_g, loss_content_feat, loss_cyc, loss_ds, loss_sacl, loss_sty
from missgan.perceptual import ToyConvExtractor
from missgan.training import build_train_state


# ---------------------------------------------------------------- oracles

def inorm_oracle(x: np.ndarray, eps: float) -> np.ndarray:
    """Elementwise loops over (n, c) planes, float64, population variance."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    n_, c_, h_, w_ = x.shape
    for n in range(n_):
        for c in range(c_):
            vals = [float(v) for v in x[n, c].ravel()]
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            denom = (var + eps) ** 0.5
            for i in range(h_):
                for j in range(w_):
                    out[n, c, i, j] = (x[n, c, i, j] - mean) / denom
    return out


def adain_oracle(x, gamma, beta, eps):
    normed = inorm_oracle(x, eps)
    out = np.empty_like(normed)
    for n in range(normed.shape[0]):
        for c in range(normed.shape[1]):
            out[n, c] = float(gamma[n, c]) * normed[n, c] + float(beta[n, c])
    return out


def affine_oracle(s, weight, bias):
    """Explicit dot products: out[n, k] = sum_j weight[k, j] * s[n, j] + bias[k]."""
    s = np.asarray(s, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    out = np.zeros((s.shape[0], weight.shape[0]))
    for n in range(s.shape[0]):
        for k in range(weight.shape[0]):
            acc = float(bias[k])
            for j in range(s.shape[1]):
                acc += weight[k, j] * s[n, j]
            out[n, k] = acc
    return out


def upsample_oracle(x, factor):
    x = np.asarray(x)
    n_, c_, h_, w_ = x.shape
    out = np.empty((n_, c_, h_ * factor, w_ * factor), dtype=x.dtype)
    for i in range(h_ * factor):
        for j in range(w_ * factor):
            out[:, :, i, j] = x[:, :, i // factor, j // factor]
    return out


def conv2d_oracle(x, weight, bias, padding):
    """Direct (cross-correlation) convolution, stride 1, zero padding."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n_, c_in, h_, w_ = x.shape
    c_out, _, kh, kw = weight.shape
    xp = np.zeros((n_, c_in, h_ + 2 * padding, w_ + 2 * padding))
    xp[:, :, padding:padding + h_, padding:padding + w_] = x
    ho, wo = h_ + 2 * padding - kh + 1, w_ + 2 * padding - kw + 1
    out = np.empty((n_, c_out, ho, wo))
    for n in range(n_):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + kh, j:j + kw] * weight[o]) + bias[o]
    return out


def mean_abs_oracle(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += abs(u - v)
    return total / len(a)


def mean_sq_oracle(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) ** 2
    return total / len(a)


# ---------------------------------------------------------------- gradients

def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def sample_coords(tensors, fraction=None, count=None, rng=None, min_per_tensor=0):
    """Pick (tensor_index, flat_index) coordinates across ``tensors``."""
    rng = rng or np.random.default_rng(0)
    sizes = np.array([t.numel() for t in tensors])
    total = int(sizes.sum())
    if count is None:
        count = max(1, int(round(total * fraction)))
    flat = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords = []
    for f in np.sort(flat):
        ti = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((ti, int(f - offsets[ti])))
    if min_per_tensor:
        have = {ti for ti, _ in coords}
        for ti, t in enumerate(tensors):
            if ti not in have:
                for fi in rng.choice(t.numel(), size=min(min_per_tensor, t.numel()), replace=False):
                    coords.append((ti, int(fi)))
    return coords


def fd_gradcheck(fn, tensors, coords=None, step=1e-4):
    """Compare autograd against central differences of scalar ``fn()``.

    ``tensors`` are float64 leaves (inputs or parameters) read by ``fn``.
    Returns (relative error, analytic values, numeric values) over ``coords``
    (all coordinates when None).
    """
    tensors = list(tensors)
    if coords is None:
        coords = [(ti, fi) for ti, t in enumerate(tensors) for fi in range(t.numel())]
    for t in tensors:
        assert t.dtype == torch.float64, "finite differences run in 64-bit"
        t.grad = None
    with torch.enable_grad():
        out = fn()
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
    analytic = []
    for ti, fi in coords:
        g = grads[ti]
        analytic.append(0.0 if g is None else float(g.reshape(-1)[fi]))
    numeric = []
    with torch.no_grad():
        for ti, fi in coords:
            view = tensors[ti].data.view(-1)
            orig = float(view[fi])
            view[fi] = orig + step
            plus = float(_eval(fn))
            view[fi] = orig - step
            minus = float(_eval(fn))
            view[fi] = orig
            numeric.append((plus - minus) / (2 * step))
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    return rel_error(analytic, numeric), analytic, numeric


def fd_gradcheck_screened(fn, tensors, coords, step=1e-4):
    """``fd_gradcheck`` that drops coordinates whose stencil straddles a kink.

    A ReLU or max-pool switch within +-step of the evaluation point makes the
    central difference meaningless there; it shows up as disagreement between
    the differences at ``step`` and ``step / 2`` (smooth functions agree to
    O(step^2)).  Returns (error over the kept coordinates, analytic, numeric,
    number excluded).
    """
    err, analytic, numeric = fd_gradcheck(fn, tensors, coords, step)
    if err < 1e-3:
        return err, analytic, numeric, 0
    _, _, half = fd_gradcheck(fn, tensors, coords, step / 2)
    smooth = np.abs(numeric - half) <= 1e-5 + 1e-4 * np.maximum(np.abs(numeric), np.abs(half))
    return rel_error(analytic[smooth], numeric[smooth]), analytic, numeric, int((~smooth).sum())


def _eval(fn):
    # fn may itself need autograd (e.g. an R1 penalty)
    with torch.enable_grad():
        return fn().detach()


def jitter_parameters(module, scale=0.1, seed=0):
    """Add small noise to every parameter in place.

    Fresh inits put zero-initialized affine biases behind instance norms of
    1x1 maps, which parks ReLUs exactly on their kink; finite differences are
    meaningless there.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            std = float(p.std()) if p.numel() > 1 else 1.0
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale * max(std, 1e-2))
    return module


# ---------------------------------------------------------------- end-to-end loss setup

def toy_loss_state(preset="E"):
    cfg = toy_config(preset, image_size=16, base_width=4, style_dim=8, mapping_width=16, latent_dim=4)
    state = build_train_state(cfg)
    return cfg, state


def generator_terms(state, x, z, z2, y_org, y_trg, only=None):
    """Generator-side loss terms of one latent round; ``only`` limits which are built."""
    G, F_, E, D = (state.nets[k] for k in ("G", "F", "E", "D"))
    want = set(only or ("adv_g", "sty", "ds", "cyc", "feat", "sacl"))
    s = F_(z, y_trg)
    enc = G.encode(x)
    fake = G.decode(enc, s)
    out = {}
    if "adv_g" in want:
        out["adv_g"] = loss_adv_g(D(fake, y_trg))
    if "sty" in want:
        out["sty"] = loss_sty(s, E(fake, y_trg))
    if "ds" in want:
        out["ds"] = loss_ds(fake, G.decode(enc, F_(z2, y_trg)))
    if "cyc" in want:
        out["cyc"] = loss_cyc(x, G(fake, E(x, y_org)))
    if "feat" in want:
        out["feat"] = loss_content_feat(state.phi, x, fake)
    if "sacl" in want:
        out["sacl"] = loss_sacl(enc.deepest, G.encode(fake).deepest, 2)
    return out


def double_loss_state(preset):
    cfg, state = toy_loss_state(preset)
    for k, name in enumerate(("G", "F", "E", "D")):
        jitter_parameters(state.nets[name].double(), seed=k)
    state.phi = ToyConvExtractor(channels=4).double()
    return cfg, state


def batch64():
    g = torch.Generator().manual_seed(5)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    z = torch.randn(2, 4, generator=g, dtype=torch.float64)
    z2 = torch.randn(2, 4, generator=g, dtype=torch.float64)
    return x, z, z2, torch.tensor([0, 1]), torch.tensor([1, 0])
