"""Minimal PNG codec for 8-bit sRGB and 16-bit linear images.

Only non-interlaced greyscale, RGB and RGBA files are handled; that is all
the pipeline writes.  Alpha is dropped on read.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from ..exceptions import DomainError, ParseError

SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(kind + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def write_image(path, image: np.ndarray, bit_depth: int = 16) -> Path:
    """Write a float image in [0, 1].

    ``bit_depth=16`` stores linear values; ``bit_depth=8`` applies the sRGB
    transfer curve and tags the file with an sRGB chunk.
    """
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise DomainError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DomainError("cannot write non-finite pixel values")
    if bit_depth == 16:
        q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    elif bit_depth == 8:
        q = np.round(srgb_encode(img) * 255.0).astype(np.uint8)
    else:
        raise DomainError(f"unsupported bit depth {bit_depth}")
    h, w = img.shape[:2]
    colour_type = 2 if img.ndim == 3 else 0
    raw = q.reshape(h, -1).view(np.uint8).reshape(h, -1)
    filtered = np.concatenate([np.zeros((h, 1), np.uint8), raw], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, colour_type, 0, 0, 0)
    parts = [SIGNATURE, _chunk(b"IHDR", ihdr)]
    if bit_depth == 8:
        parts.append(_chunk(b"sRGB", b"\x00"))
    parts.append(_chunk(b"IDAT", zlib.compress(filtered.tobytes(), 6)))
    parts.append(_chunk(b"IEND", b""))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)
    return path


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(data: bytes, h: int, stride: int, bpp: int, offset: int, path) -> np.ndarray:
    if len(data) != h * (stride + 1):
        raise ParseError(
            f"decompressed size {len(data)} does not match {h} rows of {stride} bytes", offset, path
        )
    rows = np.frombuffer(data, np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int64)
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.reshape(-1, bpp).cumsum(axis=0).reshape(-1) % 256
        elif ftype == 2:
            cur = (line + prev) % 256
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.int64)
            lst, pv = line.tolist(), prev.tolist()
            cl = [0] * stride
            for i in range(stride):
                a = cl[i - bpp] if i >= bpp else 0
                b = pv[i]
                if ftype == 3:
                    cl[i] = (lst[i] + ((a + b) >> 1)) & 0xFF
                else:
                    c = pv[i - bpp] if i >= bpp else 0
                    cl[i] = (lst[i] + _paeth(a, b, c)) & 0xFF
            cur = np.array(cl, dtype=np.int64)
        else:
            raise ParseError(f"unknown filter type {ftype} in row {y}", offset, path)
        out[y] = cur
        prev = cur
    return out


def read_image(path) -> np.ndarray:
    """Read a PNG as float32 linear values in [0, 1].

    16-bit files are taken as linear; 8-bit files are decoded through the
    sRGB curve.
    """
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != SIGNATURE:
        raise ParseError("not a PNG file (bad signature)", 0, path)
    pos = 8
    header = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(buf):
            raise ParseError("truncated chunk header", pos, path)
        (length,) = struct.unpack(">I", buf[pos : pos + 4])
        kind = buf[pos + 4 : pos + 8]
        end = pos + 12 + length
        if end > len(buf):
            raise ParseError(f"truncated {kind!r} chunk", pos, path)
        data = buf[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", buf[end - 4 : end])
        if zlib.crc32(kind + data) & 0xFFFFFFFF != crc:
            raise ParseError(f"CRC mismatch in {kind!r} chunk", pos, path)
        if kind == b"IHDR":
            if length != 13:
                raise ParseError("bad IHDR length", pos, path)
            header = struct.unpack(">IIBBBBB", data)
            header_offset = pos
        elif kind == b"IDAT":
            if idat_offset is None:
                idat_offset = pos
            idat.append(data)
        elif kind == b"IEND":
            break
        pos = end
    if header is None:
        raise ParseError("missing IHDR chunk", 8, path)
    w, h, depth, ctype, comp, filt, interlace = header
    if depth not in (8, 16):
        raise ParseError(f"unsupported bit depth {depth}", header_offset, path)
    if ctype not in _CHANNELS:
        raise ParseError(f"unsupported colour type {ctype}", header_offset, path)
    if comp != 0 or filt != 0 or interlace != 0:
        raise ParseError("unsupported compression/filter/interlace method", header_offset, path)
    if not idat:
        raise ParseError("missing IDAT chunk", pos, path)
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ParseError(f"corrupt image data: {exc}", idat_offset, path) from None
    nch = _CHANNELS[ctype]
    bpp = nch * depth // 8
    pixels = _unfilter(raw, h, w * bpp, bpp, idat_offset, path)
    if depth == 16:
        vals = pixels.view(">u2").astype(np.float64).reshape(h, w, nch) / 65535.0
    else:
        vals = srgb_decode(pixels.reshape(h, w, nch).astype(np.float64) / 255.0)
    if nch in (2, 4):
        vals = vals[..., :-1]
    if vals.shape[2] == 1:
        vals = vals[..., 0]
    return vals.astype(np.float32)
