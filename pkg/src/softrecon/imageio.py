"""Minimal deterministic PNG reader/writer (8-bit gray / RGB / RGBA).

The writer emits fixed zlib settings and filter-0 scanlines so identical
arrays always produce identical bytes; the reader handles any standard filter
type on non-interlaced 8-bit images.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_COLOR_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def _chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_png(path, array):
    """Write a (H,W), (H,W,1) or (H,W,3) uint8 array as a PNG file."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"write_png expects uint8, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        color = 0
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color = 2
    else:
        raise ValueError(f"unsupported array shape {arr.shape}")
    h, w = arr.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    raw = np.concatenate([np.zeros((h, 1), np.uint8),
                          arr.reshape(h, -1)], axis=1).tobytes()
    data = zlib.compress(raw, 6)
    with open(path, "wb") as fh:
        fh.write(_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", data)
                 + _chunk(b"IEND", b""))


def read_png(path):
    """Read an 8-bit non-interlaced PNG as (H,W) or (H,W,C) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SIGNATURE:
        raise ValueError(f"{path}: not a PNG file")
    pos, idat, ihdr = 8, b"", None
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise ValueError(f"{path}: missing IHDR")
    w, h, depth, color, _, _, interlace = ihdr
    if depth != 8 or interlace != 0 or color not in _COLOR_CHANNELS:
        raise ValueError(f"{path}: unsupported PNG (depth={depth}, "
                         f"color={color}, interlace={interlace})")
    ch = _COLOR_CHANNELS[color]
    raw = zlib.decompress(idat)
    stride = w * ch
    out = np.empty((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for row in range(h):
        ftype = raw[row * (stride + 1)]
        line = np.frombuffer(raw, np.uint8, stride, row * (stride + 1) + 1).copy()
        out[row] = _unfilter(line, prev, ftype, ch)
        prev = out[row]
    img = out.reshape(h, w, ch)
    if color == 4:
        img = img[:, :, :1]
    elif color == 6:
        img = img[:, :, :3]
    return img[:, :, 0] if img.shape[2] == 1 else img


def _unfilter(line, prev, ftype, ch):
    if ftype == 0:
        return line
    if ftype == 2:
        return line + prev
    out = np.zeros_like(line)
    n = len(line)
    for i in range(n):
        a = int(out[i - ch]) if i >= ch else 0
        b = int(prev[i])
        c = int(prev[i - ch]) if i >= ch else 0
        x = int(line[i])
        if ftype == 1:
            out[i] = (x + a) & 0xFF
        elif ftype == 3:
            out[i] = (x + (a + b) // 2) & 0xFF
        elif ftype == 4:
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
            out[i] = (x + pred) & 0xFF
        else:
            raise ValueError(f"unknown PNG filter {ftype}")
    return out


def to_uint8(array01):
    """Quantize a [0,1] float array to uint8."""
    return (np.clip(np.asarray(array01), 0.0, 1.0) * 255.0).round().astype(np.uint8)


def from_uint8(array):
    return np.asarray(array, dtype=np.float32) / 255.0
