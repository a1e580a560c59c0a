"""Two-domain image folders, preprocessing and training-batch sampling.

Expected layout::

    root/
      domainA/<source>/<images>          natural images  (domain 0)
      domainB/<illustrator>/<book>/...   illustrations   (domain 1)

Images directly inside a domain folder carry no illustrator tag.
"""
from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
DEFAULT_LAYOUT = {0: "domainA", 1: "domainB"}


class DatasetError(RuntimeError):
    pass


class ImageDecodeError(DatasetError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: str
    domain: int
    illustrator: str | None = None
    book: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    num_domains: int

    @property
    def counts(self) -> dict[int, int]:
        out = {d: 0 for d in range(self.num_domains)}
        for r in self.records:
            out[r.domain] += 1
        return out

    def illustrator_counts(self, domain: int | None = None) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            if r.illustrator is not None and (domain is None or r.domain == domain):
                out[r.illustrator] = out.get(r.illustrator, 0) + 1
        return out

    def by_domain(self, domain: int) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.domain == domain]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "domain", "illustrator", "book"])
            for r in self.records:
                writer.writerow([r.path, r.domain, r.illustrator or "", r.book or ""])

    @classmethod
    def from_csv(cls, path: str | Path, num_domains: int = 2) -> "DatasetManifest":
        records = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                records.append(ImageRecord(row["path"], int(row["domain"]), row["illustrator"] or None, row["book"] or None))
        return cls(tuple(records), num_domains)


def scan_image_folders(root: str | Path, layout: Mapping[int, str] | None = None) -> DatasetManifest:
    """Recursively collect PNG/JPEG files per domain, in lexicographic order."""
    root = Path(root)
    layout = dict(DEFAULT_LAYOUT if layout is None else layout)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    records = []
    for domain in sorted(layout):
        folder = root / layout[domain]
        if not folder.is_dir():
            raise DatasetError(f"domain {domain} folder missing: {folder}")
        try:
            files = sorted(
                p for p in folder.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
            )
        except OSError as exc:
            raise DatasetError(f"cannot read {folder}: {exc}") from None
        if not files:
            raise DatasetError(f"domain {domain} ({layout[domain]}) contains no images")
        for p in files:
            parts = p.relative_to(folder).parts
            illustrator = parts[0] if len(parts) >= 2 else None
            book = parts[1] if len(parts) >= 3 else None
            records.append(ImageRecord(str(p), domain, illustrator, book))
    return DatasetManifest(tuple(records), num_domains=max(layout) + 1)


def to_tensor_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 -> float32 3 x H x W in [-1, 1] via u / 127.5 - 1."""
    out = pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def decode_resized(path: str, target_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (target_size, target_size):
                im = im.resize((target_size, target_size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from None


def load_and_preprocess(record: ImageRecord, target_size: int, augment: bool = False,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    x = to_tensor_range(decode_resized(record.path, target_size))
    if augment:
        if rng is None:
            raise ValueError("augment=True needs an rng")
        if rng.random() < 0.5:
            x = np.ascontiguousarray(x[:, :, ::-1])
    return x


class ImageDataset:
    """Manifest plus decoded, resized pixels.

    Undecodable records are dropped at construction with a warning and counted
    in ``num_skipped``.  With ``cache=True`` decoded pixels stay in memory.
    """

    def __init__(self, manifest: DatasetManifest, image_size: int, augment: bool = True, cache: bool = True):
        self.image_size = image_size
        self.augment = augment
        self.cache = cache
        self._pixels: dict[int, np.ndarray] = {}
        kept = []
        self.num_skipped = 0
        for rec in manifest.records:
            try:
                pixels = decode_resized(rec.path, image_size)
            except ImageDecodeError as exc:
                log.warning("skipping record: %s", exc)
                self.num_skipped += 1
                continue
            if cache:
                self._pixels[len(kept)] = pixels
            kept.append(rec)
        self.manifest = DatasetManifest(tuple(kept), manifest.num_domains)
        self.domain_index = {d: self.manifest.by_domain(d) for d in range(manifest.num_domains)}

    def __len__(self):
        return len(self.manifest.records)

    def load(self, idx: int, rng: np.random.Generator | None = None) -> np.ndarray:
        if idx in self._pixels:
            x = to_tensor_range(self._pixels[idx])
        else:
            x = to_tensor_range(decode_resized(self.manifest.records[idx].path, self.image_size))
        if self.augment and rng is not None and rng.random() < 0.5:
            x = np.ascontiguousarray(x[:, :, ::-1])
        return x

    def check_trainable(self) -> None:
        for d, idx in self.domain_index.items():
            if len(idx) == 0:
                raise DatasetError(f"domain {d} is empty")
            if len(idx) < 2:
                raise DatasetError(f"domain {d} has {len(idx)} image(s); reference sampling needs >= 2")


@dataclass
class TrainingBatch:
    x: torch.Tensor
    y_org: torch.Tensor
    x_ref: torch.Tensor
    x_ref2: torch.Tensor
    y_trg: torch.Tensor
    z: torch.Tensor
    z2: torch.Tensor
    indices: dict = field(default_factory=dict)


def sample_training_batch(dataset: ImageDataset, batch_size: int, rng: np.random.Generator,
                          latent_dim: int) -> TrainingBatch:
    """Draw sources uniformly, a uniform target domain per sample, and two distinct references from it."""
    n = len(dataset)
    if n == 0:
        raise DatasetError("dataset is empty")
    records = dataset.manifest.records
    src = rng.integers(0, n, size=batch_size)
    y_trg = rng.integers(0, dataset.manifest.num_domains, size=batch_size)
    ref, ref2 = [], []
    for d in y_trg:
        pool = dataset.domain_index[int(d)]
        if len(pool) < 2:
            raise DatasetError(f"target domain {int(d)} has {len(pool)} image(s); need >= 2 for references")
        a, b = rng.choice(len(pool), size=2, replace=False)
        ref.append(pool[a])
        ref2.append(pool[b])
    x = np.stack([dataset.load(int(i), rng) for i in src])
    x_ref = np.stack([dataset.load(i, rng) for i in ref])
    x_ref2 = np.stack([dataset.load(i, rng) for i in ref2])
    z = rng.standard_normal((batch_size, latent_dim)).astype(np.float32)
    z2 = rng.standard_normal((batch_size, latent_dim)).astype(np.float32)
    return TrainingBatch(
        x=torch.from_numpy(x),
        y_org=torch.tensor([records[int(i)].domain for i in src], dtype=torch.long),
        x_ref=torch.from_numpy(x_ref),
        x_ref2=torch.from_numpy(x_ref2),
        y_trg=torch.from_numpy(y_trg.astype(np.int64)),
        z=torch.from_numpy(z),
        z2=torch.from_numpy(z2),
        indices={"src": src.tolist(), "ref": ref, "ref2": ref2},
    )


class BatchPrefetcher:
    """Produce batches on a background thread through a bounded queue.

    The producer owns its own RNG stream, so batch order is still a function
    of ``seed``; but the caller's RNG state no longer describes the pipeline
    position, so runs using prefetching do not resume bit-identically.
    """

    def __init__(self, dataset, batch_size, latent_dim, seed, depth=2):
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        rng = np.random.default_rng(seed)

        def work():
            while not self._stop.is_set():
                try:
                    item = sample_training_batch(dataset, batch_size, rng, latent_dim)
                except Exception as exc:  # surfaced to the consumer
                    item = exc
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if isinstance(item, Exception):
                    return

        self._thread = threading.Thread(target=work, daemon=True)
        self._thread.start()

    def __iter__(self) -> Iterator[TrainingBatch]:
        return self

    def __next__(self) -> TrainingBatch:
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


def make_synthetic_dataset(root: str | Path, n_per_domain: int = 200, size: int = 32, seed: int = 0,
                           layout: Mapping[int, str] | None = None) -> Path:
    """Write a procedurally generated two-domain PNG set.

    Domain 0 (photo proxy): shapes filled with per-pixel noise texture on a
    noisy background.  Domain 1 (illustration proxy): flat-color shapes on a
    flat background, split across two pseudo-illustrators.
    """
    root = Path(root)
    layout = dict(DEFAULT_LAYOUT if layout is None else layout)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    for domain in (0, 1):
        for i in range(n_per_domain):
            sub = "photos" if domain == 0 else f"artist{i % 2}"
            out_dir = root / layout[domain] / sub
            out_dir.mkdir(parents=True, exist_ok=True)
            if domain == 0:
                img = rng.normal(0.5, 0.15, (size, size, 3)) * rng.uniform(0.5, 1.0, 3)
            else:
                img = np.ones((size, size, 3)) * rng.uniform(0.2, 1.0, 3)
            for _ in range(rng.integers(1, 4)):
                cy, cx = rng.uniform(0, size, 2)
                r = rng.uniform(size / 8, size / 3)
                if rng.random() < 0.5:
                    mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
                else:
                    mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
                color = rng.uniform(0, 1, 3)
                if domain == 0:
                    img[mask] = color * rng.uniform(0.6, 1.2, (int(mask.sum()), 3))
                else:
                    img[mask] = color
            pixels = np.clip(img * 255.0, 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(out_dir / f"img_{i:04d}.png")
    return root
