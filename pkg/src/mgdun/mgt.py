"""MGT1 binary tensor container.

Layout: 4-byte magic ``MGT1``, four little-endian u32 dims (n, c, h, w), then
n*c*h*w little-endian float32 values in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGT1"
_HEADER = struct.Struct("<4s4I")


class FormatError(ValueError):
    pass


def as_nchw(arr: np.ndarray) -> np.ndarray:
    """Left-pad the shape with ones up to four dims (bias vectors, scalars)."""
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise FormatError(f"MGT1 holds at most 4 dims, got shape {arr.shape}")
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def to_bytes(arr: np.ndarray) -> bytes:
    a = as_nchw(arr)
    body = np.ascontiguousarray(a, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, *a.shape) + body


def from_bytes(buf: bytes) -> np.ndarray:
    arr, used = read_one(buf, 0)
    if used != len(buf):
        raise FormatError(f"trailing {len(buf) - used} bytes after MGT1 payload")
    return arr


def read_one(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated MGT1 header")
    magic, n, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    count = n * c * h * w
    start = offset + _HEADER.size
    end = start + 4 * count
    if end > len(buf):
        raise FormatError(f"truncated MGT1 payload: need {4 * count} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return data.astype(np.float32).reshape(n, c, h, w), end


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path: str | Path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def write_pgm16(path: str | Path, img: np.ndarray) -> None:
    """Export a single-channel image in [0, 1] as a 16-bit binary PGM."""
    a = np.asarray(img, dtype=np.float64)
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 else a
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a single 2-D image, got shape {np.shape(img)}")
    q = np.round(np.clip(a, 0.0, 1.0) * 65535).astype(">u2")
    buf = io.BytesIO()
    buf.write(f"P5\n{q.shape[1]} {q.shape[0]}\n65535\n".encode("ascii"))
    buf.write(q.tobytes())
    Path(path).write_bytes(buf.getvalue())
