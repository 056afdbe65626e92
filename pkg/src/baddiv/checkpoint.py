"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic           8 bytes  b"BDCKPT\\x00\\x01" (includes format version 1)
    arch_hash       u16 length + utf-8
    config_hash     u16 length + utf-8
    step            u64
    n_tensors       u32
    tensor record   u16 name length + utf-8 name, u8 rank, u32 * rank extents,
                    float32 little-endian payload (row-major)
    has_optimizer   u8
    [n_opt u32 + tensor records for the optimizer state]

Tensor names are written in insertion order, so save -> load -> save
round-trips to byte-identical files.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint",
           "load_checkpoint", "arch_hash"]

MAGIC = b"BDCKPT\x00\x01"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch_hash: str
    config_hash: str
    step: int
    tensors: dict[str, np.ndarray]
    optimizer: Optional[dict[str, np.ndarray]]


def arch_hash(descriptor: str, named_shapes) -> str:
    """Hash of an architecture: a descriptor string plus every tensor shape."""
    h = hashlib.sha256()
    h.update(descriptor.encode())
    for name, shape in named_shapes:
        h.update(f"|{name}:{tuple(shape)}".encode())
    return h.hexdigest()


def _write_str(f, s: str) -> None:
    b = s.encode()
    f.write(struct.pack("<H", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", f.read(2))
    return f.read(n).decode()


def _write_tensors(f, tensors: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        _write_str(f, name)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def _read_tensors(f) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", f.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = _read_str(f)
        (rank,) = struct.unpack("<B", f.read(1))
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        payload = f.read(4 * n)
        if len(payload) != 4 * n:
            raise CheckpointError(f"truncated tensor payload for {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


def save_checkpoint(path, *, arch: str, config_hash: str, step: int,
                    tensors: dict[str, np.ndarray],
                    optimizer: Optional[dict[str, np.ndarray]] = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        _write_str(f, arch)
        _write_str(f, config_hash)
        f.write(struct.pack("<Q", step))
        _write_tensors(f, tensors)
        f.write(struct.pack("<B", 1 if optimizer else 0))
        if optimizer:
            _write_tensors(f, optimizer)
    tmp.replace(path)


def load_checkpoint(path, expected_arch: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic/version")
        arch = _read_str(f)
        config_hash = _read_str(f)
        (step,) = struct.unpack("<Q", f.read(8))
        tensors = _read_tensors(f)
        (has_opt,) = struct.unpack("<B", f.read(1))
        optimizer = _read_tensors(f) if has_opt else None
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(
            f"{path}: architecture hash mismatch: checkpoint {arch} vs "
            f"expected {expected_arch}")
    return Checkpoint(arch_hash=arch, config_hash=config_hash, step=step,
                      tensors=tensors, optimizer=optimizer)
