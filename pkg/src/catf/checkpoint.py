"""Flat binary checkpoint format for named parameter tensors.

Layout: magic "CATF1", then for each parameter in lexicographic name order:
name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each), raw
float32 LE values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"CATF1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(params):
            data = np.asarray(params[name].data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read parameters back as float arrays keyed by name."""
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        raw = take(4 * count, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    return out
