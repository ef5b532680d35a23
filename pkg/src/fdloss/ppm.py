"""Binary portable pixmap (P6, maxval 255) reading and writing."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise FormatError(f"P6 needs an h x w x 3 uint8 array, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_ppm(blob: bytes, source="<bytes>") -> np.ndarray:
    match = _HEADER.match(blob)
    if not match:
        raise FormatError(f"{source}: missing P6 header")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise FormatError(f"{source}: only maxval 255 is supported, got {maxval}")
    body = blob[match.end() :]
    if len(body) != w * h * 3:
        raise FormatError(f"{source}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_ppm(pixels))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    return decode_ppm(path.read_bytes(), source=str(path))
