"""Binary tensor containers for checkpoints, adapters and Fisher files.

Layout: 5 magic bytes, format version (u32), header length (u32), UTF-8 JSON
header, then one record per tensor in store order: name length (u32), UTF-8
name, rank (u32), dims (u32 each), raw little-endian float64 data. All
integers are little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
MAGIC_MODEL = b"CLAB1"
MAGIC_ADAPTER = b"CLABA"
MAGIC_FISHER = b"CLABF"
_MAGICS = (MAGIC_MODEL, MAGIC_ADAPTER, MAGIC_FISHER)


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    if magic not in _MAGICS:
        raise ValueError(f"unknown magic {magic!r}")
    head = json.dumps(header, sort_keys=True).encode()
    out = [magic, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:5] != magic:
        raise ContainerError(f"bad magic {blob[:5]!r}, expected {magic!r}")
    try:
        version, hlen = struct.unpack_from("<II", blob, 5)
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported format version {version}")
        pos = 13
        header = json.loads(blob[pos:pos + hlen].decode())
        pos += hlen
        tensors: dict[str, np.ndarray] = {}
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            tensors[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"truncated or corrupt container: {exc}") from None
    return header, tensors


def save(path: str | Path, magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> str:
    blob = dumps(magic, header, tensors)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)
