"""Binary tensor-table files for checkpoints (``CTPK``) and embedding caches (``CTPE``).

Layout, all integers little-endian u32::

    magic(4) | version | len(config) | config JSON (UTF-8)
    repeated until EOF: len(name) | name | rank | dims... | float32 data
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"CTPK"
EMBEDDING_MAGIC = b"CTPE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], config: dict, magic: bytes = CHECKPOINT_MAGIC) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes, magic: bytes = CHECKPOINT_MAGIC) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
    pos = 4

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(data):
            raise CheckpointError("truncated file")
        (val,) = struct.unpack_from("<I", data, pos)
        pos += 4
        return val

    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    n = u32()
    config = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        n = u32()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(shape).astype(np.float32)
        pos = end
    return tensors, config


def save(path, tensors: dict[str, np.ndarray], config: dict, magic: bytes = CHECKPOINT_MAGIC) -> str:
    """Write the file and return the SHA-256 of its bytes."""
    payload = dumps(tensors, config, magic)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load(path, magic: bytes = CHECKPOINT_MAGIC) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), magic)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
