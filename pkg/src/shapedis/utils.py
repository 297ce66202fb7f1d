"""Small shared helpers: hashing, seeding, deterministic execution."""

from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path

import numpy as np
import torch


def sha256_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    """Hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_json(obj) -> str:
    """Digest of an object's canonical JSON encoding (sorted keys)."""
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


def hash_module_params(module: torch.nn.Module) -> str:
    """Digest of a module's parameters and buffers, in name order.

    Captures exact float bytes, so any weight update changes the digest.
    """
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        tensor = state[name].detach().cpu().contiguous()
        h.update(str(tensor.dtype).encode())
        h.update(np.ascontiguousarray(tensor.numpy()).tobytes())
    return h.hexdigest()


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def enable_determinism() -> None:
    """Single-threaded, algorithm-deterministic torch execution."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)


def as_float_array(x, name: str, shape_hint: str = "") -> np.ndarray:
    """Coerce to a float64 numpy array, raising a package error on failure."""
    from .errors import InputError

    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name}: not numeric ({exc})") from exc
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: contains non-finite values")
    if shape_hint:
        pass  # caller validates dimensionality; hint is for messages only
    return arr
