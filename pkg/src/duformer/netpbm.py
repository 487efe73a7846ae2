"""Binary PGM (P5) and PPM (P6) codec, 8-bit only."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(image: np.ndarray) -> bytes:
    """P5 for (H, W) arrays, P6 for (H, W, 3); maxval 255, no comments."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError(f"netpbm encoder needs uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def _skip_space(buf: bytes, pos: int) -> int:
    while pos < len(buf):
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    return pos


def _read_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    pos = _skip_space(buf, pos)
    start = pos
    while pos < len(buf) and buf[pos : pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise NetpbmError(f"expected {what}", start)
    return int(buf[start:pos]), pos


def decode(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    width, pos = _read_int(buf, 2, "width")
    height, pos = _read_int(buf, pos, "height")
    if width < 1 or height < 1:
        raise NetpbmError(f"non-positive extent {width}x{height}", pos)
    maxval_at = _skip_space(buf, pos)
    maxval, pos = _read_int(buf, pos, "maxval")
    if maxval != 255:
        raise NetpbmError(f"maxval {maxval} unsupported, expected 255", maxval_at)
    if pos >= len(buf) or buf[pos : pos + 1] not in _WHITESPACE:
        raise NetpbmError("missing whitespace after maxval", pos)
    pos += 1
    expected = width * height * channels
    payload = buf[pos:]
    if len(payload) < expected:
        raise NetpbmError(
            f"truncated payload: {len(payload)} of {expected} bytes", pos + len(payload)
        )
    if len(payload) > expected:
        raise NetpbmError(f"{len(payload) - expected} trailing bytes after payload", pos + expected)
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def write(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))


def read(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
