"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"UWMVSCK1"
    meta_len     u32
    metadata     meta_len bytes of UTF-8 JSON text
    count        u32
    count x entry:
        name_len u16, name (UTF-8)
        ndim     u8, dims u32 * ndim
        payload  prod(dims) little-endian float32
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import ParseError

MAGIC = b"UWMVSCK1"


def save_checkpoint(path, arrays: dict, metadata: dict | None = None) -> Path:
    path = Path(path)
    meta = json.dumps(metadata or {}, sort_keys=True, indent=1).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, metadata)`` from a file written by :func:`save_checkpoint`."""
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated checkpoint while reading {what}", offset=pos, path=path)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("bad checkpoint magic", offset=0, path=path)
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta_start = pos
    try:
        metadata = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint metadata: {exc}", offset=meta_start, path=path) from None
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n = int(np.prod(shape)) if ndim else 1
        payload = take(4 * n, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise ParseError("trailing bytes after last entry", offset=pos, path=path)
    return arrays, metadata
