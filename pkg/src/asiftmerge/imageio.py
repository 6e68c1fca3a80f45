"""Reading and writing PNG, binary PPM (P6) and binary PGM (P5) files."""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from .errors import ImageFormatError

_WS = b" \t\n\r\v\f"


def _parse_netpbm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return ``(width, height, maxval, raster_offset)``.

    Comments run from ``#`` to end of line and may appear anywhere in the
    header; exactly one whitespace byte separates maxval from the raster.
    """
    if data[:2] != magic:
        raise ImageFormatError(f"expected magic {magic!r}, got {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ImageFormatError("truncated Netpbm header")
        c = data[pos]
        if c == ord("#"):
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("unterminated comment in header")
            pos = end + 1
        elif c in _WS:
            pos += 1
        else:
            m = re.match(rb"\d+", data[pos:])
            if not m:
                raise ImageFormatError(f"bad header token at byte {pos}")
            fields.append(int(m.group()))
            pos += len(m.group())
    if pos >= len(data) or data[pos] not in _WS:
        raise ImageFormatError("missing whitespace after maxval")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid header values {fields}")
    return width, height, maxval, pos + 1


def _read_raster(data: bytes, offset: int, count: int, maxval: int) -> np.ndarray:
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = count * dtype.itemsize
    if len(data) - offset < need:
        raise ImageFormatError("truncated raster")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset)


def _to_u8(values: np.ndarray, maxval: int) -> np.ndarray:
    if maxval == 255:
        return values.astype(np.uint8)
    scaled = np.rint(values.astype(np.float64) * 255.0 / maxval)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, maxval, off = _parse_netpbm_header(data, b"P6")
    vals = _read_raster(data, off, w * h * 3, maxval)
    return _to_u8(vals, maxval).reshape(h, w, 3)


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, maxval, off = _parse_netpbm_header(data, b"P5")
    vals = _read_raster(data, off, w * h, maxval)
    return _to_u8(vals, maxval).reshape(h, w)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (h, w, 3) image")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM needs an (h, w) image")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_color(path: str | os.PathLike) -> np.ndarray:
    """Load an RGB image from PNG or PPM (other Pillow formats work too)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:2] == b"P5":
        g = decode_pgm(data)
        return np.repeat(g[..., None], 3, axis=2)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Load a mask as a bool array (nonzero = foreground)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"P5":
        return decode_pgm(data) > 0
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 0
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def write_pgm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(path, format="PNG")


def write_color(path, img: np.ndarray) -> None:
    if str(path).lower().endswith((".ppm", ".pnm")):
        write_ppm(path, img)
    else:
        write_png(path, img)
