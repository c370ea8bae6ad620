"""Minimal lossless PNG codec for 8-bit RGBA images (no interlacing)."""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an (H, W, 4) uint8 array. Filter 0 on every row, zlib level 9, no ancillary chunks."""
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    if px.ndim != 3 or px.shape[2] != 4:
        raise ValueError(f"expected (H, W, 4) RGBA array, got shape {px.shape}")
    h, w, _ = px.shape
    raw = np.zeros((h, 1 + 4 * w), dtype=np.uint8)
    raw[:, 1:] = px.reshape(h, 4 * w)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 6, 0, 0, 0)
    idat = zlib.compress(raw.tobytes(), 9)
    return _SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def decode_png(data: bytes) -> np.ndarray:
    """Decode an 8-bit RGBA, non-interlaced PNG into an (H, W, 4) uint8 array."""
    if not data.startswith(_SIGNATURE):
        raise ValueError("not a PNG file")
    pos = len(_SIGNATURE)
    idat = bytearray()
    hdr = None
    while pos < len(data):
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        tag = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + n]
        if zlib.crc32(tag + body) & 0xFFFFFFFF != struct.unpack(">I", data[pos + 8 + n:pos + 12 + n])[0]:
            raise ValueError(f"CRC mismatch in {tag!r} chunk")
        if tag == b"IHDR":
            hdr = struct.unpack(">IIBBBBB", body)
        elif tag == b"IDAT":
            idat += body
        elif tag == b"IEND":
            break
        pos += 12 + n
    if hdr is None:
        raise ValueError("missing IHDR")
    w, h, depth, ctype, _, _, interlace = hdr
    if depth != 8 or ctype != 6 or interlace != 0:
        raise ValueError("only 8-bit RGBA non-interlaced PNGs are supported")
    stride = 4 * w
    raw = np.frombuffer(zlib.decompress(bytes(idat)), dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for r in range(h):
        ftype, line = raw[r, 0], raw[r, 1:]
        if ftype == 0:
            cur = line.copy()
        elif ftype == 2:
            cur = (line.astype(np.uint16) + prev).astype(np.uint8)
        elif ftype == 1:
            cur = line.reshape(w, 4).astype(np.int64).cumsum(axis=0).astype(np.uint8).reshape(stride)
        elif ftype in (3, 4):
            cur = np.zeros(stride, dtype=np.uint8)
            for i in range(stride):
                a = int(cur[i - 4]) if i >= 4 else 0
                b = int(prev[i])
                if ftype == 3:
                    pred = (a + b) // 2
                else:
                    pred = _paeth(a, b, int(prev[i - 4]) if i >= 4 else 0)
                cur[i] = (int(line[i]) + pred) & 0xFF
        else:
            raise ValueError(f"unknown filter type {ftype}")
        out[r] = cur
        prev = cur
    return out.reshape(h, w, 4)


def write_png_bytes(data: bytes, path: str | os.PathLike) -> None:
    """Atomically write encoded PNG bytes."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
