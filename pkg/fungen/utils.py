"""
Shared helpers: atomic file output, float formatting and seeded generators.
"""

import json
import logging
import math
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

import numpy as np
import torch

from . import DEFAULT_SETTINGS

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """
    Write bytes to path through a temporary file in the same directory.

    Args:
        path: Destination file
        data: Payload
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: PathLike, payload, indent: int = 2) -> None:
    atomic_write_text(path, json.dumps(payload, indent=indent, sort_keys=False) + "\n")


@contextmanager
def atomic_directory(path: PathLike) -> Iterator[Path]:
    """
    Build a directory under a temporary name and rename it into place on success.

    An existing directory at path is replaced only after the new one is complete.

    Args:
        path: Final directory location

    Yields:
        Path: Temporary directory to populate
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise

    backup = None
    if path.exists():
        backup = path.with_name(f".{path.name}.old")
        if backup.exists():
            shutil.rmtree(backup)
        os.replace(path, backup)
    os.replace(tmp, path)
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)
    logger.debug(f"Wrote directory {path}")


def format_float(value: float, digits: int = None) -> float:
    """Round to the configured number of significant digits."""
    if digits is None:
        digits = DEFAULT_SETTINGS["float_digits"]
    if value == 0 or not math.isfinite(value):
        return float(value)
    return float(f"{value:.{digits}g}")


def round_floats(payload, digits: int = None):
    """Recursively apply format_float to every float inside dicts and lists."""
    if isinstance(payload, dict):
        return {key: round_floats(value, digits) for key, value in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [round_floats(value, digits) for value in payload]
    if isinstance(payload, (float, np.floating)):
        return format_float(float(payload), digits)
    if isinstance(payload, np.integer):
        return int(payload)
    return payload


def make_rng(seed: int) -> np.random.Generator:
    """Numpy generator used for corruption, dropout and data synthesis."""
    return np.random.default_rng(seed)


def make_torch_generator(seed: int) -> torch.Generator:
    """CPU torch generator used for parameter initialization."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
