"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import ValidationError


def _tokens(buf: bytes, count: int):
    """Return the first ``count`` header tokens and the offset of the raster."""
    out = []
    i = 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise ValidationError("truncated PNM header")
        out.append(buf[start:i])
    # exactly one whitespace byte separates maxval from the raster
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    """Decode a P6 file to ``uint8 [H, W, 3]`` or a P5 file to ``uint8 [H, W]``."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"{path}: unsupported PNM magic {magic!r}")
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off) if len(buf) - off >= n else None
    if raster is None:
        raise ValidationError(f"{path}: raster shorter than {width}x{height}x{channels}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return raster.reshape(shape).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"PPM needs [H, W, 3] data, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValidationError(f"PGM needs [H, W] data, got {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())
