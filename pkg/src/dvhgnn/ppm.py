"""Binary P6 PPM reading and writing (8-bit RGB only)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np


class PpmError(ValueError):
    pass


@dataclass
class PpmImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise PpmError(f"pixel array {self.pixels.shape} does not match {self.height}x{self.width}x3")

    @classmethod
    def from_array(cls, rgb: np.ndarray) -> "PpmImage":
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise PpmError(f"rgb must be (H, W, 3), got {rgb.shape}")
        return cls(rgb.shape[1], rgb.shape[0], rgb.astype(np.uint8))

    def to_bytes(self) -> bytes:
        return f"P6\n{self.width} {self.height}\n255\n".encode("ascii") + self.pixels.tobytes()


def _header_tokens(data: bytes):
    """Yield (token, end_offset) for the 4 header fields, skipping # comments."""
    pos, n = 0, len(data)
    found = 0
    while found < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PpmError("truncated PPM header")
        found += 1
        yield data[start:pos], pos


def decode_ppm(data: bytes) -> PpmImage:
    tokens = list(_header_tokens(data))
    magic = tokens[0][0]
    if magic != b"P6":
        raise PpmError(f"not a binary PPM (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise PpmError("non-integer PPM header field") from None
    if width < 1 or height < 1:
        raise PpmError(f"bad PPM size {width}x{height}")
    if maxval != 255:
        raise PpmError(f"only maxval 255 is supported, got {maxval}")
    # exactly one whitespace byte separates the header from the raster
    start = tokens[-1][1] + 1
    need = width * height * 3
    raster = data[start:start + need]
    if len(raster) != need:
        raise PpmError(f"PPM raster has {len(raster)} bytes, expected {need}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()
    return PpmImage(width, height, pixels)


def read_ppm(path: Union[str, Path]) -> PpmImage:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: Union[str, Path], image: Union[PpmImage, np.ndarray]) -> None:
    if not isinstance(image, PpmImage):
        image = PpmImage.from_array(image)
    Path(path).write_bytes(image.to_bytes())
