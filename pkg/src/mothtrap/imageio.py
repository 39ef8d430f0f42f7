"""8-bit images and binary PGM (P5) / PPM (P6) files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """Row-major 8-bit image, ``pixels`` shaped (H, W) or (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ImageFormatError(f"pixels must be uint8, got {px.dtype}")
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3) or min(px.shape[:2]) < 1:
            raise ImageFormatError(f"pixels must be (H, W) or (H, W, 3), got {px.shape}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @classmethod
    def from_float(cls, arr) -> "Image":
        """Build from floats in [0, 1] (values are clipped and rounded)."""
        return cls(np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8))

    def to_float(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / 255.0

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageFormatError("truncated PNM header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte precedes the raster


def decode_pnm(data: bytes) -> Image:
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError("only binary PGM (P5) and PPM (P6) are supported")
    (magic, w, h, maxval), start = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError("malformed PNM header") from None
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images (maxval 255) are supported, got {maxval}")
    ch = 1 if magic == b"P5" else 3
    n = w * h * ch
    raster = data[start:start + n]
    if len(raster) != n:
        raise ImageFormatError(f"PNM raster truncated: {len(raster)} of {n} bytes")
    px = np.frombuffer(raster, dtype=np.uint8).reshape((h, w) if ch == 1 else (h, w, 3))
    return Image(px)


def encode_pnm(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode()
    return header + img.pixels.tobytes()


def read_image(path) -> Image:
    return decode_pnm(Path(path).read_bytes())


def write_image(img: Image, path) -> None:
    Path(path).write_bytes(encode_pnm(img))
