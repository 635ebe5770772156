"""
Checkpoint directories.

A checkpoint is a directory holding manifest.json and tensors.bin. The
manifest lists every tensor (name, shape, dtype, byte_offset, byte_len) in
state-dict order together with the model config, the label registries and
their content hash; tensors.bin is the concatenation of the raw little-endian
float32 tensors in the same order.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from pydantic import ValidationError

from .config import DenoiserConfig
from .denoiser import Denoiser, init_params
from .errors import CorruptCheckpoint
from .seqcore import Registries
from .utils import atomic_directory

logger = logging.getLogger(__name__)

FORMAT = "fungen-checkpoint/1"
MANIFEST = "manifest.json"
TENSORS = "tensors.bin"
DTYPE = "f32"
ITEM_SIZE = 4


def save_checkpoint(model: Denoiser, registries: Registries, path, extra: Optional[dict] = None,
                    files: Optional[dict] = None) -> Path:
    """
    Write a checkpoint directory atomically.

    Args:
        model: Denoiser to persist; parameters are stored as float32
        registries: Label registries the model's annotation tables index into
        path: Target directory, replaced if it exists
        extra: Additional manifest fields (e.g. training summary)
        files: {file name: text} written into the directory alongside the tensors

    Returns:
        Path: The checkpoint directory
    """
    if registries.sizes() != model.sizes:
        raise CorruptCheckpoint(f"registry sizes {registries.sizes()} do not match model {model.sizes}", str(path))

    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        data = np.ascontiguousarray(tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": DTYPE,
            "byte_offset": offset,
            "byte_len": len(data),
        })
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format": FORMAT,
        "config": model.config.model_dump(mode="json"),
        "registries": registries.to_json(),
        "registry_hash": registries.content_hash,
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)

    with atomic_directory(path) as tmp:
        (tmp / TENSORS).write_bytes(b"".join(chunks))
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        for name, text in (files or {}).items():
            (tmp / name).write_text(text, encoding="utf-8")
    logger.info(f"Saved checkpoint with {len(entries)} tensors ({offset} bytes) to {path}")
    return Path(path)


def read_manifest(path) -> dict:
    manifest_path = Path(path) / MANIFEST
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read {manifest_path}: {e}", str(path)) from e
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"manifest is not valid JSON: {e}", str(path)) from e
    for key in ("format", "config", "registries", "registry_hash", "tensors"):
        if key not in manifest:
            raise CorruptCheckpoint(f"manifest is missing field {key!r}", str(path))
    if manifest["format"] != FORMAT:
        raise CorruptCheckpoint(f"unsupported checkpoint format {manifest['format']!r}", str(path))
    return manifest


def load_checkpoint(path, expected_hash: Optional[str] = None) -> tuple:
    """
    Load a checkpoint directory.

    Args:
        path: Checkpoint directory
        expected_hash: Registry hash the caller's data was curated with, if known

    Returns:
        tuple: (Denoiser, DenoiserConfig, Registries); parameters are bit-identical to the saved ones

    Raises:
        CorruptCheckpoint: Missing files, length or shape mismatches, or a registry hash mismatch
    """
    manifest = read_manifest(path)
    registries = Registries.from_json(manifest["registries"])
    if registries.content_hash != manifest["registry_hash"]:
        raise CorruptCheckpoint(
            f"registry hash mismatch: manifest says {manifest['registry_hash']}, "
            f"registries hash to {registries.content_hash}",
            str(path),
        )
    if expected_hash is not None and expected_hash != registries.content_hash:
        raise CorruptCheckpoint(
            f"checkpoint registries {registries.content_hash} differ from dataset registries {expected_hash}",
            str(path),
        )

    try:
        config = DenoiserConfig.model_validate(manifest["config"])
    except ValidationError as e:
        raise CorruptCheckpoint(f"manifest config is invalid: {e.errors()[0]['msg']}", str(path)) from e

    try:
        blob = (Path(path) / TENSORS).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read tensor file: {e}", str(path)) from e

    model = init_params(config)
    expected = model.state_dict()
    entries = manifest["tensors"]
    if [entry.get("name") for entry in entries] != list(expected):
        raise CorruptCheckpoint("manifest tensor names do not match the model layout", str(path))

    state, offset = {}, 0
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype") != DTYPE:
            raise CorruptCheckpoint(f"tensor {name} has unsupported dtype {entry.get('dtype')!r}", str(path))
        if shape != tuple(expected[name].shape):
            raise CorruptCheckpoint(f"tensor {name} has shape {list(shape)}, model expects "
                                    f"{list(expected[name].shape)}", str(path))
        byte_len = int(np.prod(shape, dtype=np.int64)) * ITEM_SIZE
        if entry["byte_len"] != byte_len or entry["byte_offset"] != offset:
            raise CorruptCheckpoint(f"tensor {name} has inconsistent byte_offset/byte_len", str(path))
        if offset + byte_len > len(blob):
            raise CorruptCheckpoint(f"tensor file truncated inside {name}", str(path))
        array = np.frombuffer(blob, dtype="<f4", count=byte_len // ITEM_SIZE, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(array.astype(np.float32))
        offset += byte_len
    if offset != len(blob):
        raise CorruptCheckpoint(f"tensor file holds {len(blob) - offset} trailing bytes", str(path))

    model.load_state_dict(state)
    model.eval()
    logger.info(f"Loaded checkpoint {path} ({len(entries)} tensors)")
    return model, config, registries


def checkpoint_summary(path) -> dict:
    """Manifest summary printed by the inspect subcommand."""
    manifest = read_manifest(path)
    n_params = sum(int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest["tensors"])
    summary = {
        "path": str(path),
        "format": manifest["format"],
        "tensor_count": len(manifest["tensors"]),
        "parameter_count": n_params,
        "registry_hash": manifest["registry_hash"],
        "registry_sizes": {kind: len(labels) for kind, labels in manifest["registries"].items()},
        "config": manifest["config"],
    }
    if "training" in manifest:
        summary["training"] = manifest["training"]
    return summary
