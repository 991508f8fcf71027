"""Binary PNM (P5 grey / P6 RGB) codec, 8- and 16-bit.  16-bit samples are big-endian."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


class BadMagicError(ImageFormatError):
    pass


class BadMaxvalError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


@dataclass
class ImageBuffer:
    data: np.ndarray  # H x W x C, uint8 or uint16
    bit_depth: int

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ImageFormatError(f"bit depth must be 8 or 16, got {self.bit_depth}")
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageFormatError(f"expected H x W x {{1,3}}, got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > self.max_value):
            raise ImageFormatError(f"samples outside [0, {self.max_value}]")
        self.data = arr.astype(np.uint8 if self.bit_depth == 8 else np.uint16)

    @property
    def max_value(self) -> int:
        return 2**self.bit_depth - 1

    @property
    def shape(self):
        return self.data.shape

    def to_float(self) -> np.ndarray:
        """Samples scaled to [0, 1] as float64."""
        return self.data.astype(np.float64) / self.max_value

    @classmethod
    def from_float(cls, x: np.ndarray, bit_depth: int = 8) -> "ImageBuffer":
        top = 2**bit_depth - 1
        q = np.rint(np.clip(x, 0.0, 1.0) * top)
        return cls(q.astype(np.uint16 if bit_depth == 16 else np.uint8), bit_depth)


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens (with ``#`` comments); return them and the data offset."""
    out, pos, n = [], 0, len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError("header ends early")
        out.append(buf[start:pos])
    if pos >= n:
        raise TruncatedImageError("no pixel data after header")
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def decode_pnm(buf: bytes) -> ImageBuffer:
    if len(buf) < 2:
        raise TruncatedImageError("file too short")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"unsupported magic {magic!r} (need binary P5/P6)")
    channels = 3 if magic == b"P6" else 1
    (w, h, maxval), off = _tokens(buf[2:], 3)
    off += 2
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric header field: {exc}") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    if maxval == 255:
        depth, dt = 8, np.dtype("u1")
    elif maxval == 65535:
        depth, dt = 16, np.dtype(">u2")
    else:
        raise BadMaxvalError(f"maxval {maxval} unsupported (need 255 or 65535)")
    need = w * h * channels * dt.itemsize
    raster = buf[off:off + need]
    if len(raster) < need:
        raise TruncatedImageError(f"raster has {len(raster)} bytes, expected {need}")
    data = np.frombuffer(raster, dtype=dt).reshape(h, w, channels)
    return ImageBuffer(data.astype(np.uint8 if depth == 8 else np.uint16), depth)


def encode_pnm(img: ImageBuffer) -> bytes:
    h, w, c = img.data.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n{img.max_value}\n".encode("ascii")
    dt = np.dtype("u1") if img.bit_depth == 8 else np.dtype(">u2")
    return header + img.data.astype(dt).tobytes()


def read_image(path) -> ImageBuffer:
    return decode_pnm(Path(path).read_bytes())


def write_image(path, img: ImageBuffer) -> None:
    Path(path).write_bytes(encode_pnm(img))
