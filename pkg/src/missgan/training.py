"""Optimization loop.

One iteration performs, in order:

1. discriminator update against latent-driven fakes,
2. discriminator update against reference-driven fakes,
3. generator/mapping/style-encoder update, latent round,
4. generator update, reference round,
5. EMA update of G, F and E,
6. iteration tick (the diversity weight decays linearly with the iteration).

The losses reported per iteration are the means of the two discriminator
updates and of the two generator rounds.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import CheckpointBundle, CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, from_flat, to_flat
from .data import BatchPrefetcher, ImageDataset, TrainingBatch, sample_training_batch
from .discriminator import build_discriminator
from .generator import build_generator
from .losses import (
    LossReport,
    NonFiniteLossError,
    discriminator_objective,
    generator_objective,
    loss_adv_d,
    loss_adv_g,
    loss_content_feat,
    loss_cyc,
    loss_ds,
    loss_sacl,
    loss_sty,
    r1_penalty,
)
from .perceptual import FeatureExtractor, build_feature_extractor
from .stylenets import build_mapping_network, build_style_encoder

log = logging.getLogger(__name__)

NETS = ("G", "F", "E", "D")
EMA_NETS = ("G", "F", "E")


@dataclass
class TrainState:
    cfg: ModelConfig
    nets: dict[str, nn.Module]
    ema: dict[str, nn.Module]
    optims: dict[str, torch.optim.Optimizer]
    rng: np.random.Generator
    iteration: int = 0
    phi: FeatureExtractor | None = None


def _set_requires_grad(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


def build_train_state(cfg: ModelConfig, phi: FeatureExtractor | None = None) -> TrainState:
    nets = {
        "G": build_generator(cfg),
        "F": build_mapping_network(cfg),
        "E": build_style_encoder(cfg),
        "D": build_discriminator(cfg),
    }
    ema = {}
    for name in EMA_NETS:
        ema[name] = copy.deepcopy(nets[name])
        _set_requires_grad(ema[name], False)
    o = cfg.optim
    lrs = {"G": o.lr_g, "F": o.lr_f, "E": o.lr_e, "D": o.lr_d}
    optims = {
        name: torch.optim.Adam(
            nets[name].parameters(), lr=lrs[name], betas=(o.adam_beta1, o.adam_beta2), weight_decay=o.weight_decay
        )
        for name in NETS
    }
    if phi is None and (cfg.loss_weights.lambda_feat > 0):
        phi = build_feature_extractor(cfg)
    return TrainState(cfg, nets, ema, optims, np.random.default_rng(cfg.seed), 0, phi)


def ds_weight(cfg: ModelConfig, iteration: int) -> float:
    """Diversity weight after ``iteration`` completed iterations: linear decay to 0."""
    lw = cfg.loss_weights
    frac = min(max(iteration, 0) / lw.ds_decay_iters, 1.0)
    return lw.lambda_ds * (1.0 - frac)


@torch.no_grad()
def ema_update(ema: nn.Module, live: nn.Module, decay: float) -> nn.Module:
    """ema <- decay * ema + (1 - decay) * live, in place."""
    ema_params = dict(ema.named_parameters())
    live_params = dict(live.named_parameters())
    if ema_params.keys() != live_params.keys():
        missing = sorted(set(ema_params) ^ set(live_params))
        raise ValueError(f"EMA inventory mismatch: {missing[:5]}")
    for name, p_ema in ema_params.items():
        p_live = live_params[name]
        if p_ema.shape != p_live.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {tuple(p_ema.shape)} vs {tuple(p_live.shape)}")
        p_ema.mul_(decay).add_(p_live, alpha=1.0 - decay)
    return ema


def _zero_grads(state: TrainState) -> None:
    for net in state.nets.values():
        net.zero_grad(set_to_none=True)


def _d_step(state: TrainState, batch: TrainingBatch, use_reference: bool) -> dict:
    G, F_, E, D = (state.nets[k] for k in NETS)
    cfg = state.cfg
    x_real = batch.x.detach().requires_grad_(True)
    out_real = D(x_real, batch.y_org)
    r1 = r1_penalty(out_real, x_real, cfg.loss_weights.r1_gamma)
    with torch.no_grad():
        if use_reference:
            s_trg = E(batch.x_ref, batch.y_trg)
        else:
            s_trg = F_(batch.z, batch.y_trg)
        x_fake = G(batch.x, s_trg)
    out_fake = D(x_fake, batch.y_trg)
    adv = loss_adv_d(out_real, out_fake)
    terms = {"adv_d": adv, "r1": r1}
    total = discriminator_objective(terms)
    _zero_grads(state)
    total.backward()
    state.optims["D"].step()
    _zero_grads(state)
    return {"adv_d": adv.item(), "r1": r1.item(), "total_d": total.item()}


def _g_step(state: TrainState, batch: TrainingBatch, use_reference: bool) -> dict:
    G, F_, E, D = (state.nets[k] for k in NETS)
    cfg = state.cfg
    lw = cfg.loss_weights
    lambda_ds = ds_weight(cfg, state.iteration)
    _set_requires_grad(D, False)
    if use_reference:
        _set_requires_grad(F_, False)
        _set_requires_grad(E, False)
    try:
        if use_reference:
            s_trg = E(batch.x_ref, batch.y_trg)
            s_trg2 = E(batch.x_ref2, batch.y_trg)
        else:
            s_trg = F_(batch.z, batch.y_trg)
            s_trg2 = F_(batch.z2, batch.y_trg)
        e_real = G.encode(batch.x)
        x_fake = G.decode(e_real, s_trg)
        terms = {"adv_g": loss_adv_g(D(x_fake, batch.y_trg))}
        terms["sty"] = loss_sty(s_trg, E(x_fake, batch.y_trg))
        x_fake2 = G.decode(e_real, s_trg2).detach()
        terms["ds"] = loss_ds(x_fake, x_fake2)
        s_org = E(batch.x, batch.y_org)
        x_rec = G(x_fake, s_org)
        terms["cyc"] = loss_cyc(batch.x, x_rec)
        if lw.lambda_feat > 0:
            if state.phi is None:
                raise RuntimeError("lambda_feat > 0 but no feature extractor is configured")
            terms["feat"] = loss_content_feat(state.phi, batch.x, x_fake)
        if lw.lambda_sacl > 0:
            terms["sacl"] = loss_sacl(e_real.deepest, G.encode(x_fake).deepest, cfg.num_domains)
        total = generator_objective(terms, lw, lambda_ds=lambda_ds)
        _zero_grads(state)
        total.backward()
        state.optims["G"].step()
        if not use_reference:
            state.optims["F"].step()
            state.optims["E"].step()
        _zero_grads(state)
    finally:
        _set_requires_grad(D, True)
        _set_requires_grad(F_, True)
        _set_requires_grad(E, True)
    out = {k: v.item() for k, v in terms.items()}
    out["total_g"] = total.item()
    return out


def train_step(state: TrainState, batch: TrainingBatch) -> LossReport:
    """Run one full iteration in place on ``state`` and return its loss report."""
    d_lat = _d_step(state, batch, use_reference=False)
    d_ref = _d_step(state, batch, use_reference=True)
    g_lat = _g_step(state, batch, use_reference=False)
    g_ref = _g_step(state, batch, use_reference=True)
    decay = state.cfg.optim.ema_decay
    for name in EMA_NETS:
        ema_update(state.ema[name], state.nets[name], decay)
    state.iteration += 1

    def avg(key, a, b):
        return 0.5 * (a.get(key, 0.0) + b.get(key, 0.0))

    report = LossReport(
        adv_d=avg("adv_d", d_lat, d_ref),
        r1=avg("r1", d_lat, d_ref),
        total_d=avg("total_d", d_lat, d_ref),
        **{k: avg(k, g_lat, g_ref) for k in ("adv_g", "sty", "ds", "cyc", "feat", "sacl", "total_g")},
    )
    if not report.is_finite():
        raise NonFiniteLossError(f"non-finite loss at iteration {state.iteration}: {report.as_dict()}", report)
    return report


# --------------------------------------------------------------------------
# checkpoint conversion


def _t2n(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32, copy=True)


def state_to_bundle(state: TrainState) -> CheckpointBundle:
    tensors: dict[str, np.ndarray] = {}
    for name in NETS:
        for pname, p in state.nets[name].state_dict().items():
            tensors[f"{name}/{pname}"] = _t2n(p)
    for name in EMA_NETS:
        for pname, p in state.ema[name].state_dict().items():
            tensors[f"{name}_ema/{pname}"] = _t2n(p)
    steps: dict[str, dict[str, int]] = {}
    for name in NETS:
        opt = state.optims[name]
        steps[name] = {}
        for pname, p in state.nets[name].named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            steps[name][pname] = int(st["step"])
            tensors[f"optim_{name}/{pname}/exp_avg"] = _t2n(st["exp_avg"])
            tensors[f"optim_{name}/{pname}/exp_avg_sq"] = _t2n(st["exp_avg_sq"])
    extra = {
        "config": to_flat(state.cfg),
        "rng_state": state.rng.bit_generator.state,
        "optim_steps": steps,
    }
    return CheckpointBundle(state.iteration, state.cfg.hash(), tensors, extra)


def _load_module(net: nn.Module, tensors: dict, prefix: str) -> None:
    sd = net.state_dict()
    new = {}
    for key, ref in sd.items():
        full = f"{prefix}/{key}"
        if full not in tensors:
            raise CheckpointError(f"missing tensor {full!r}")
        arr = tensors[full]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {full!r}: {arr.shape} vs {tuple(ref.shape)}")
        new[key] = torch.from_numpy(np.array(arr, dtype=np.float32))
    net.load_state_dict(new)


def config_from_bundle(bundle: CheckpointBundle) -> ModelConfig:
    if "config" not in bundle.extra:
        raise CheckpointError("checkpoint manifest carries no config")
    cfg = from_flat(bundle.extra["config"])
    if cfg.hash() != bundle.config_hash:
        raise CheckpointError("stored config does not match the manifest config hash")
    return cfg


def bundle_to_state(bundle: CheckpointBundle, cfg: ModelConfig | None = None,
                    phi: FeatureExtractor | None = None) -> TrainState:
    if cfg is None:
        cfg = config_from_bundle(bundle)
    elif cfg.hash() != bundle.config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {bundle.config_hash[:12]} != current {cfg.hash()[:12]}"
        )
    state = build_train_state(cfg, phi)
    t = bundle.tensors
    for name in NETS:
        _load_module(state.nets[name], t, name)
    for name in EMA_NETS:
        _load_module(state.ema[name], t, f"{name}_ema")
    steps = bundle.extra.get("optim_steps", {})
    for name in NETS:
        opt = state.optims[name]
        params = list(state.nets[name].named_parameters())
        sd = opt.state_dict()
        opt_state = {}
        for idx, (pname, p) in enumerate(params):
            if pname not in steps.get(name, {}):
                continue
            opt_state[idx] = {
                "step": torch.tensor(float(steps[name][pname]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(np.array(t[f"optim_{name}/{pname}/exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(t[f"optim_{name}/{pname}/exp_avg_sq"])),
            }
        sd["state"] = opt_state
        opt.load_state_dict(sd)
    rng = np.random.default_rng()
    if "rng_state" in bundle.extra:
        rng.bit_generator.state = bundle.extra["rng_state"]
    state.rng = rng
    state.iteration = bundle.iteration
    return state


def checkpoint_dir(out_dir: str | Path, iteration: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"iter_{iteration:08d}"


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    root = Path(out_dir) / "checkpoints"
    if not root.is_dir():
        return None
    found = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("iter_"))
    return found[-1] if found else None


# --------------------------------------------------------------------------
# fit


class TrainingLog:
    """Append-only CSV with one LossReport row per iteration."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(["iteration", *LossReport.header()])

    def write(self, iteration: int, report: LossReport) -> None:
        self._writer.writerow([iteration, *(repr(float(v)) for v in report.row())])

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_training_log(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def fit(cfg: ModelConfig, dataset: ImageDataset, total_iters: int, checkpoint_every: int,
        out_dir: str | Path, resume: str | Path | None = None, phi: FeatureExtractor | None = None,
        callback=None) -> TrainState:
    """Train until ``total_iters`` iterations are complete.

    Checkpoints go to ``out_dir/checkpoints/iter_XXXXXXXX`` every
    ``checkpoint_every`` iterations and at the end; the CSV log is
    ``out_dir/train_log.csv``.  ``resume`` names a checkpoint directory whose
    config hash must equal ``cfg``'s.  ``callback(state, report)`` is called
    after every iteration.
    """
    if checkpoint_every < 1:
        raise ValueError("checkpoint_every must be >= 1")
    dataset.check_trainable()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = bundle_to_state(load_checkpoint(resume, expected_config_hash=cfg.hash()), cfg, phi)
        log.info("resumed from %s at iteration %d", resume, state.iteration)
    else:
        state = build_train_state(cfg, phi)
    train_log = TrainingLog(out_dir / "train_log.csv")
    prefetcher = None
    if cfg.prefetch > 0:
        seed = int(state.rng.integers(0, 2**63 - 1))
        prefetcher = BatchPrefetcher(dataset, cfg.batch_size, cfg.latent_dim, seed, depth=cfg.prefetch)
    try:
        while state.iteration < total_iters:
            if prefetcher is not None:
                batch = next(prefetcher)
            else:
                batch = sample_training_batch(dataset, cfg.batch_size, state.rng, cfg.latent_dim)
            try:
                report = train_step(state, batch)
            except NonFiniteLossError as exc:
                train_log.flush()
                log.error("aborting: %s", exc)
                raise
            train_log.write(state.iteration, report)
            if callback is not None:
                callback(state, report)
            if state.iteration % checkpoint_every == 0 or state.iteration == total_iters:
                train_log.flush()
                save_checkpoint(state_to_bundle(state), checkpoint_dir(out_dir, state.iteration))
                log.info("iteration %d: %s", state.iteration, report.as_dict())
    finally:
        if prefetcher is not None:
            prefetcher.close()
        train_log.close()
    return state

