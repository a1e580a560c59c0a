"""Command-line front end: ``missgan train | generate | eval``.

Failures exit with status 2 and a single stderr line of the form
``error=<category> message=<text>``; categories are config, dataset,
checkpoint, input, nonfinite and io.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ModelConfig, load_config, preset_config
from .data import (
    IMAGE_SUFFIXES,
    DatasetError,
    ImageDataset,
    ImageDecodeError,
    decode_resized,
    scan_image_folders,
    to_tensor_range,
)
from .generator import build_generator
from .losses import NonFiniteLossError, loss_content_feat, loss_ds
from .perceptual import FeatureWeightsError, build_feature_extractor
from .stylenets import build_mapping_network, build_style_encoder
from .training import _load_module, config_from_bundle, fit, latest_checkpoint

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

log = logging.getLogger("missgan")


class InputError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ------------------------------------------------------------------ config


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(None, f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def resolve_config(args) -> ModelConfig:
    overrides = dict(_parse_override(s) for s in (args.set or []))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "phi_weights", None):
        overrides["phi_weights"] = args.phi_weights
    if args.config:
        cfg = load_config(args.config)
        return cfg.replace(**overrides) if overrides else cfg
    return preset_config(args.preset or "MISSGAN", **overrides)


# ------------------------------------------------------------------ inference helpers


@dataclass
class InferenceModel:
    cfg: ModelConfig
    G: torch.nn.Module
    F: torch.nn.Module
    E: torch.nn.Module
    iteration: int


def _resolve_checkpoint(path: str | Path) -> Path:
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    found = latest_checkpoint(path)
    if found is None:
        raise CheckpointError(f"no checkpoint found at {path}")
    return found


def load_inference_model(path: str | Path, use_ema: bool = True) -> InferenceModel:
    bundle = load_checkpoint(_resolve_checkpoint(path))
    cfg = config_from_bundle(bundle)
    nets = {"G": build_generator(cfg), "F": build_mapping_network(cfg), "E": build_style_encoder(cfg)}
    for name, net in nets.items():
        _load_module(net, bundle.tensors, f"{name}_ema" if use_ema else name)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
    return InferenceModel(cfg, nets["G"], nets["F"], nets["E"], bundle.iteration)


def _round16(n: int) -> int:
    return max(16, int(round(n / 16)) * 16)


def read_input_image(path: str | Path, resize: bool) -> torch.Tensor:
    """Load an image at its own size as 1x3xHxW; sides must be multiples of 16."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            if h % 16 or w % 16:
                if not resize:
                    raise InputError(f"{path}: size {h}x{w} not divisible by 16 (pass --resize)")
                nh, nw = _round16(h), _round16(w)
                log.warning("resizing %s from %dx%d to %dx%d", path, h, w, nh, nw)
                im = im.resize((nw, nh), Image.BILINEAR)
            pixels = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"cannot read input image {path}: {exc}") from None
    return torch.from_numpy(to_tensor_range(pixels))[None]


def read_reference_image(path: str | Path, size: int) -> torch.Tensor:
    try:
        return torch.from_numpy(to_tensor_range(decode_resized(str(path), size)))[None]
    except ImageDecodeError as exc:
        raise InputError(str(exc)) from None


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """3xHxW generator output -> HxWx3 uint8, clamping to [-1, 1] first."""
    x = x.detach().clamp(-1.0, 1.0)
    u = torch.round((x + 1.0) * 127.5).to(torch.uint8)
    return u.permute(1, 2, 0).cpu().numpy()


def sample_latents(num: int, latent_dim: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((num, latent_dim)).astype(np.float32))


def output_name(input_path: str | Path, index: int) -> str:
    return f"{Path(input_path).stem}_style{index:02d}.png"


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalScores:
    content: float
    diversity: float
    per_image: list[tuple[float, float]]


def evaluate(generator: Callable, mapping: Callable, phi: Callable, images: Sequence[torch.Tensor],
             num_styles: int, target_domain: int, latent_dim: int, seed: int = 0) -> EvalScores:
    """Content and diversity diagnostics.

    For every image ``x`` (1x3xHxW) and each of ``num_styles`` latent styles
    ``s``: content is the mean of ``loss_content_feat(phi, x, G(x, s))``;
    diversity is the mean ``loss_ds`` over all unordered pairs of outputs
    (0 when there is a single style).  The same latents serve every image.
    """
    if num_styles < 1:
        raise ValueError("num_styles must be >= 1")
    images = list(images)
    if not images:
        raise DatasetError("no images to evaluate")
    z = sample_latents(num_styles, latent_dim, seed)
    per_image = []
    with torch.no_grad():
        styles = mapping(z, torch.full((num_styles,), target_domain, dtype=torch.long))
        for x in images:
            outs = [generator(x, styles[k:k + 1]) for k in range(num_styles)]
            content = sum(float(loss_content_feat(phi, x, o)) for o in outs) / num_styles
            pairs = list(itertools.combinations(outs, 2))
            diversity = sum(float(loss_ds(a, b)) for a, b in pairs) / len(pairs) if pairs else 0.0
            per_image.append((content, diversity))
    n = len(per_image)
    return EvalScores(sum(c for c, _ in per_image) / n, sum(d for _, d in per_image) / n, per_image)


def list_images(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"evaluation folder not found: {folder}")
    files = sorted(p for p in folder.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"evaluation folder {folder} contains no images")
    return files


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    manifest = scan_image_folders(args.data_root)
    dataset = ImageDataset(manifest, cfg.image_size, augment=True)
    if dataset.num_skipped:
        log.warning("%d undecodable image(s) skipped", dataset.num_skipped)
    resume = args.resume
    if resume == "latest":
        resume = latest_checkpoint(args.out_dir)
        if resume is None:
            raise CheckpointError(f"--resume latest: no checkpoint under {args.out_dir}")
    state = fit(cfg, dataset, args.iters, args.checkpoint_every, args.out_dir, resume=resume)
    print(f"trained preset={cfg.preset} iterations={state.iteration} out_dir={args.out_dir}")
    return 0


def cmd_generate(args) -> int:
    model = load_inference_model(args.checkpoint, use_ema=args.use_ema)
    cfg = model.cfg
    if not 0 <= args.target_domain < cfg.num_domains:
        raise InputError(f"--target-domain must be in [0, {cfg.num_domains})")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    y = torch.tensor([args.target_domain])
    if args.mode == "latent":
        z = sample_latents(args.num_styles, cfg.latent_dim, args.seed if args.seed is not None else 0)
        with torch.no_grad():
            styles = [model.F(z[k:k + 1], y) for k in range(args.num_styles)]
    else:
        if not args.ref:
            raise InputError("reference mode needs at least one --ref image")
        with torch.no_grad():
            styles = [model.E(read_reference_image(r, cfg.image_size), y) for r in args.ref]
    written = 0
    for path in args.input:
        x = read_input_image(path, args.resize)
        with torch.no_grad():
            for k, s in enumerate(styles):
                out = model.G(x, s)[0]
                Image.fromarray(to_uint8(out)).save(out_dir / output_name(path, k))
                written += 1
    print(f"wrote {written} image(s) to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model = load_inference_model(args.checkpoint, use_ema=args.use_ema)
    cfg = model.cfg
    if args.phi_weights:
        cfg = cfg.replace(phi_weights=args.phi_weights)
    phi = build_feature_extractor(cfg)
    files = list_images(args.data_root)
    images = [read_reference_image(p, cfg.image_size) for p in files]
    scores = evaluate(model.G, model.F, phi, images, args.num_styles, args.target_domain,
                      cfg.latent_dim, args.seed if args.seed is not None else 0)
    rows = [(str(p), c, d) for p, (c, d) in zip(files, scores.per_image)]
    rows.append(("mean", scores.content, scores.diversity))
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(["image", "content", "diversity"])
        for name, c, d in rows:
            writer.writerow([name, f"{c:.6g}", f"{d:.6g}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="missgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="flat TOML config file")
        g.add_argument("--preset", help="A, B, C, D, E or MISSGAN (default MISSGAN)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    def add_model_flags(sp):
        sp.add_argument("--checkpoint", required=True, help="checkpoint dir or training out dir")
        sp.add_argument("--use-ema", action=argparse.BooleanOptionalAction, default=True)
        sp.add_argument("--target-domain", type=int, default=1, help="default 1 (illustrations)")
        sp.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train a model")
    add_config_flags(t)
    t.add_argument("--data-root", required=True)
    t.add_argument("--iters", type=int, required=True)
    t.add_argument("--checkpoint-every", type=int, default=10000)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="checkpoint dir, or 'latest'")
    t.add_argument("--phi-weights", help="VGG16 relu2_2 weight file")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="stylize images")
    add_model_flags(g)
    g.add_argument("--input", nargs="+", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--mode", choices=("latent", "reference"), default="latent")
    g.add_argument("--ref", nargs="+", default=[])
    g.add_argument("--num-styles", type=int, default=1)
    g.add_argument("--resize", action="store_true", help="round input sides to multiples of 16")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="content / diversity diagnostics")
    add_model_flags(e)
    e.add_argument("--data-root", required=True, help="folder of evaluation images")
    e.add_argument("--num-styles", type=int, default=4)
    e.add_argument("--phi-weights", help="VGG16 relu2_2 weight file (overrides the checkpoint's)")
    e.add_argument("--out", help="CSV path (default stdout)")
    e.set_defaults(func=cmd_eval)
    return p


_CATEGORIES = (
    (ConfigError, "config"),
    (FeatureWeightsError, "config"),
    (DatasetError, "dataset"),
    (CheckpointError, "checkpoint"),
    (InputError, "input"),
    (NonFiniteLossError, "nonfinite"),
    (OSError, "io"),
)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "num_styles", 1) < 1:
        return _fail("input", "--num-styles must be >= 1")
    try:
        return args.func(args)
    except Exception as exc:
        for cls, category in _CATEGORIES:
            if isinstance(exc, cls):
                return _fail(category, str(exc))
        raise


def _fail(category: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"error={category} message={text}", file=sys.stderr)
    return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
