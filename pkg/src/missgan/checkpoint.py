"""Named-tensor blob files and checkpoint directories.

Blob file layout (little-endian)::

    b"MGT1"
    u32  tensor count
    per tensor:
        u16  name length, UTF-8 name
        u8   dtype code (0 = float32)
        u8   ndim
        ndim x u32 dims
        raw float32 payload

A checkpoint directory holds one blob file per tensor group (the part of the
tensor name before the first ``/``) plus ``manifest.json`` with
``format_version``, ``iteration``, ``config_hash`` and ``tensor_index``.
"""
from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MGT1"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_SUFFIX = ".mgt"
_DTYPE_CODES = {0: np.dtype("<f4")}


class CheckpointError(RuntimeError):
    pass


def write_tensor_file(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` in insertion order to a blob file."""
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r}: only float32 is supported, got {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensor_file(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    offset = 4

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise CheckpointError(f"{path}: truncated file")
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = take("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = take(f"<{ndim}I") if ndim else ()
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float32)
        offset += nbytes
    return out


@dataclass
class CheckpointBundle:
    """Everything needed to restore a training run.

    ``tensors`` maps names such as ``"G/encoder.stem.weight"`` or
    ``"optim_G/3/exp_avg"`` to float32 arrays.  ``extra`` holds JSON-able
    metadata (config, RNG state, optimizer step counts, ...).
    """

    iteration: int
    config_hash: str
    tensors: dict[str, np.ndarray]
    extra: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _group(name: str) -> str:
    return name.split("/", 1)[0] if "/" in name else "misc"


def save_checkpoint(bundle: CheckpointBundle, directory: str | Path) -> Path:
    """Write ``bundle`` into ``directory`` (replaced atomically if it exists)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        groups: dict[str, dict[str, np.ndarray]] = {}
        index = {}
        for name, arr in bundle.tensors.items():
            group = _group(name)
            groups.setdefault(group, {})[name] = arr
            index[name] = {"file": group + BLOB_SUFFIX, "shape": list(np.shape(arr)), "dtype": "f32"}
        for group, tensors in groups.items():
            write_tensor_file(tmp / (group + BLOB_SUFFIX), tensors)
        manifest = {
            "format_version": bundle.format_version,
            "iteration": int(bundle.iteration),
            "config_hash": bundle.config_hash,
            "tensor_index": index,
            "extra": bundle.extra,
        }
        (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def read_manifest(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise CheckpointError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {path}: {exc}") from None
    for key in ("format_version", "iteration", "config_hash", "tensor_index"):
        if key not in manifest:
            raise CheckpointError(f"manifest {path} lacks field {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest['format_version']} (expected {FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint(directory: str | Path, expected_config_hash: str | None = None) -> CheckpointBundle:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest['config_hash'][:12]} != current {expected_config_hash[:12]}"
        )
    files: dict[str, dict[str, np.ndarray]] = {}
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensor_index"].items():
        fname = entry["file"]
        if fname not in files:
            path = directory / fname
            if not path.is_file():
                raise CheckpointError(f"missing tensor {name!r}: blob file {fname} not found")
            files[fname] = read_tensor_file(path)
        blob = files[fname]
        if name not in blob:
            raise CheckpointError(f"missing tensor {name!r} in {fname}")
        arr = blob[name]
        if list(arr.shape) != list(entry["shape"]):
            raise CheckpointError(f"shape mismatch for {name!r}: file {list(arr.shape)} vs manifest {entry['shape']}")
        tensors[name] = arr
    return CheckpointBundle(
        iteration=int(manifest["iteration"]),
        config_hash=manifest["config_hash"],
        tensors=tensors,
        extra=manifest.get("extra", {}),
        format_version=manifest["format_version"],
    )
