"""Portable float map (PFM) I/O.

Depth maps are written as greyscale ``Pf`` files, little-endian (scale
``-1.0``), rows stored bottom-up.  Invalid pixels are stored as 0.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from ..exceptions import DomainError, ParseError

_TOKEN = re.compile(rb"\S+")


def write_pfm(path, data: np.ndarray) -> Path:
    path = Path(path)
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    elif arr.ndim == 2:
        tag = b"Pf"
    else:
        raise DomainError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    payload = np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + payload)
    os.replace(tmp, path)
    return path


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0
    fields = []
    # three whitespace-separated header tokens after the tag: width height scale
    while len(fields) < 4:
        m = _TOKEN.search(buf, pos)
        if m is None or m.start() > 256:
            raise ParseError("truncated PFM header", pos, path)
        fields.append((m.group(), m.start()))
        pos = m.end()
    pos += 1  # single whitespace byte ends the header
    tag, tag_off = fields[0]
    if tag not in (b"PF", b"Pf"):
        raise ParseError(f"bad PFM tag {tag!r}", tag_off, path)
    try:
        w = int(fields[1][0])
        h = int(fields[2][0])
    except ValueError:
        raise ParseError("bad PFM dimensions", fields[1][1], path) from None
    try:
        scale = float(fields[3][0])
    except ValueError:
        raise ParseError("bad PFM scale", fields[3][1], path) from None
    if w <= 0 or h <= 0:
        raise ParseError("non-positive PFM dimensions", fields[1][1], path)
    if scale == 0:
        raise ParseError("PFM scale must be non-zero", fields[3][1], path)
    nch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * nch * 4
    if len(buf) - pos != need:
        raise ParseError(f"expected {need} payload bytes, found {len(buf) - pos}", pos, path)
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * nch, offset=pos).astype(np.float32)
    arr = arr.reshape((h, w, nch) if nch == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr)


def read_depth(path) -> np.ndarray:
    return read_pfm(path)


def write_depth(path, depth: np.ndarray, valid: np.ndarray | None = None) -> Path:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise DomainError(f"depth map must be 2-D, got {depth.shape}")
    if valid is not None:
        depth = np.where(valid, depth, 0.0).astype(np.float32)
    if not np.all(np.isfinite(depth)):
        raise DomainError("depth map contains non-finite values; mark them invalid")
    return write_pfm(path, depth)
