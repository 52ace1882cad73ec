"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os
import re

import numpy as np

from protofaith.errors import FormatError

_TOKEN = re.compile(rb"(?:\s|#[^\n\r]*[\n\r])*(\S+)")


def _parse(data: bytes, path) -> tuple[bytes, int, int, int, int]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed netpbm header") from None
    if width < 1 or height < 1:
        raise FormatError(f"{path}: image dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit files with max value 255 are supported, got {maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after netpbm header")
    return magic, width, height, maxval, pos + 1


def _read(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    found, width, height, _, start = _parse(data, path)
    if found != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, found {found.decode()}")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = data[start : start + size]
    if len(payload) < size:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels == 3 else arr.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    """Return a (H, W, 3) uint8 array."""
    return _read(path, b"P6")


def read_pgm(path) -> np.ndarray:
    """Return a (H, W) uint8 array."""
    return _read(path, b"P5")


def _write(path, magic: bytes, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise FormatError(f"netpbm writer expects uint8 pixels, got {pixels.dtype}")
    h, w = pixels.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(pixels).tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"PPM pixels must have shape (H, W, 3), got {pixels.shape}")
    _write(path, b"P6", pixels)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise FormatError(f"PGM pixels must have shape (H, W), got {pixels.shape}")
    _write(path, b"P5", pixels)


def tensor_to_bytes(x: np.ndarray) -> np.ndarray:
    """(3, H, W) values in [0, 1] -> (H, W, 3) uint8."""
    q = np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def saliency_to_bytes(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    top = v.max()
    if top <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint(v / top * 255.0), 0, 255).astype(np.uint8)
