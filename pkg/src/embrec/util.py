"""Small shared helpers."""

from __future__ import annotations

import hashlib

import numpy as np


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


def tensor_digest(tensors: dict[str, np.ndarray]) -> str:
    """Order-stable sha256 over named tensors, for freeze-contract checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        arr = np.ascontiguousarray(tensors[name])
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
