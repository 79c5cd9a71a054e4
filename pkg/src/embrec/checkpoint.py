"""Versioned binary tensor container used by every model artifact.

Byte layout (all integers little-endian):

    magic        8 bytes  b"EMBRCKPT"
    version      u32      currently 1
    config_hash  32 bytes sha256 of the run config that produced the file
    seed         u64      global seed recorded for provenance
    n_sections   u32
    then per section, sorted by name:
      name_len   u16
      name       utf-8 bytes
      ndim       u8
      dims       u32 x ndim
      data       float32, row-major

Tensors are float64 in memory and stored as float32; loading returns float64
arrays whose values are exactly the stored float32 values, so a save/load
round trip is idempotent. Model bundles keep their parts as name prefixes
("backbone.", "lora.", "proj_user.", "proj_item."); a part is present iff
any section carries its prefix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"EMBRCKPT"
VERSION = 1
HASH_BYTES = 32


class CheckpointError(RuntimeError):
    """Raised on malformed or incompatible checkpoint files."""


@dataclass(frozen=True)
class CheckpointMeta:
    version: int
    config_hash: bytes
    seed: int


def save_checkpoint(
    path, sections: dict[str, np.ndarray], config_hash: bytes, seed: int
) -> None:
    if len(config_hash) != HASH_BYTES:
        raise ValueError(f"config_hash must be {HASH_BYTES} bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), config_hash, struct.pack("<Q", seed)]
    parts.append(struct.pack("<I", len(sections)))
    for name in sorted(sections):
        arr = np.asarray(sections[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_hash = bytes(take(HASH_BYTES))
    (seed,) = struct.unpack("<Q", take(8))
    (n_sections,) = struct.unpack("<I", take(4))
    sections: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4")
        sections[name] = data.astype(np.float64).reshape(shape)
    if off != len(view):
        raise CheckpointError(f"{path}: trailing bytes after last section")
    return CheckpointMeta(version=version, config_hash=config_hash, seed=seed), sections


def prefixed(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": arr for name, arr in tensors.items()}


def take_prefix(sections: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Sections under prefix with the prefix stripped; empty if absent."""
    lead = prefix + "."
    return {k[len(lead):]: v for k, v in sections.items() if k.startswith(lead)}


def has_prefix(sections: dict[str, np.ndarray], prefix: str) -> bool:
    lead = prefix + "."
    return any(k.startswith(lead) for k in sections)


# --- typed pack/unpack for the concrete parameter groups ----------------------


def _rebuild(template: dict[str, np.ndarray], stored: dict[str, np.ndarray], what: str):
    """Copy stored sections into template-shaped arrays; shapes must agree."""
    out = {}
    for name, ref in template.items():
        if name not in stored:
            raise CheckpointError(f"missing {what} section {name!r}")
        arr = stored[name]
        if arr.shape != ref.shape:
            raise CheckpointError(
                f"{what} section {name!r} has shape {arr.shape}, expected {ref.shape}"
            )
        out[name] = arr
    extra = set(stored) - set(template)
    if extra:
        raise CheckpointError(f"unexpected {what} sections {sorted(extra)}")
    return out


def unpack_backbone(cfg, sections: dict[str, np.ndarray]):
    from .model import BackboneParams, LayerParams, init_backbone

    template = init_backbone(cfg)
    stored = _rebuild(template.tensors(), take_prefix(sections, "backbone"), "backbone")
    layers = [
        LayerParams(**{k: stored[f"layer{i}.{k}"] for k in
                       ("wq", "wk", "wv", "wo", "w1", "w2", "g1", "g2")})
        for i in range(cfg.n_layers)
    ]
    return BackboneParams(config=cfg, E=stored["E"], P=stored["P"], layers=layers)


def unpack_lora(cfg, rank: int, alpha_lora: float, sections: dict[str, np.ndarray]):
    from .model import LoraParams, init_lora

    template = init_lora(cfg, rank, alpha_lora, seed=0)
    stored = _rebuild(template.tensors(), take_prefix(sections, "lora"), "lora")
    return LoraParams(rank=rank, alpha_lora=alpha_lora, tensors_by_name=stored)


def unpack_projector(prefix: str, sections: dict[str, np.ndarray]):
    from .projectors import ProjectorParams

    stored = take_prefix(sections, prefix)
    for name in ("W1", "b1", "W2", "b2"):
        if name not in stored:
            raise CheckpointError(f"missing {prefix} section {name!r}")
    return ProjectorParams(
        W1=stored["W1"], b1=stored["b1"], W2=stored["W2"], b2=stored["b2"]
    )


def pack_bundle(backbone=None, lora=None, f_u=None, f_i=None) -> dict[str, np.ndarray]:
    """Name-prefixed sections for whichever parts are present."""
    sections: dict[str, np.ndarray] = {}
    if backbone is not None:
        sections.update(prefixed("backbone", backbone.tensors()))
    if lora is not None:
        sections.update(prefixed("lora", lora.tensors()))
    if f_u is not None:
        sections.update(prefixed("proj_user", f_u.tensors()))
    if f_i is not None:
        sections.update(prefixed("proj_item", f_i.tensors()))
    return sections
