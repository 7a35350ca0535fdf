"""Binary checkpoint format.

Layout: b"GSAU", uint32 version, then for each tensor: uint32 name length,
UTF-8 name, uint32 rank, rank x uint32 dims, little-endian float32 payload.
All integers are little-endian. Tensors are written in sorted name order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"GSAU"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")  # ascontiguousarray would promote scalars to 1-d
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GSAU checkpoint")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")

    out: dict[str, np.ndarray] = {}
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return out


def load_into(params: Mapping, tensors: Mapping[str, np.ndarray], prefix: str = "param/") -> None:
    """Copy ``prefix``-named arrays into the Tensor values of ``params``, checking shapes."""
    missing = [n for n in params if prefix + n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing}")
    bad = [
        f"{n}: checkpoint {tensors[prefix + n].shape} vs model {params[n].shape}"
        for n in params
        if tensors[prefix + n].shape != params[n].shape
    ]
    if bad:
        raise CheckpointError("dimension mismatch: " + "; ".join(bad))
    for n, p in params.items():
        p.data = tensors[prefix + n].astype(p.dtype)
