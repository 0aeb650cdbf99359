"""Binary/ASCII PGM input, binary PGM output, optional PNG input."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .imaging import ImageError, as_gray


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def decode_pgm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise ImageError(f"unsupported PNM magic {magic!r}; only P5/P2 grayscale")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    width, height, maxval = int(w), int(h), int(maxval)
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageError("bad PGM dimensions or maxval")
    if magic == b"P2":
        values, _ = _tokens(data, width * height, pos)
        arr = np.array([int(v) for v in values], dtype=np.int64)
    else:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        nbytes = width * height * dtype.itemsize
        if len(data) - pos < nbytes:
            raise ImageError("truncated PGM pixel data")
        arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).astype(np.int64)
    if maxval != 255:
        arr = np.floor(arr * 255.0 / maxval + 0.5).astype(np.int64)
    return arr.reshape(height, width).astype(np.uint8)


def encode_pgm(img) -> bytes:
    img = as_gray(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    """Read a grayscale image. PGM natively, PNG/JPEG through Pillow if installed."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P2"):
        return decode_pgm(data)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageError(f"{path}: not a PGM and Pillow is not installed") from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_bytes_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_pgm(path, img) -> None:
    write_bytes_atomic(path, encode_pgm(img))
