"""8-bit binary portable graymap ("P5") rasters.

Images are stored as round(value * 255) and read back as value / 255; masks are
stored as {0, 255}.
"""
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.errors import ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
_WHITESPACE = b" \t\r\n"


def quantize(raster: np.ndarray) -> np.ndarray:
    raster = np.asarray(raster)
    if raster.dtype == np.uint8:
        return raster
    return np.rint(np.clip(raster, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(raster: np.ndarray) -> bytes:
    pixels = quantize(raster)
    if pixels.ndim != 2:
        raise ValueError(f"graymap rasters are 2-D, got shape {pixels.shape}")
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def _next_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif data[pos] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return data[start:pos], pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a P5 graymap into a uint8 array; errors carry the failing byte offset."""
    if data[:2] != b"P5":
        raise ParseError(f"bad magic {data[:2]!r}, expected b'P5'", 0)
    if len(data) < 3 or data[2] not in _WHITESPACE:
        raise ParseError("missing whitespace after magic", 2)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        token, pos = _next_token(data, pos)
        if not token.isdigit() or int(token) <= 0:
            raise ParseError(f"invalid {name} {token!r}", start)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"only 8-bit graymaps are supported, maxval is {maxval}", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    expected = width * height
    actual = len(data) - pos
    if actual < expected:
        raise ParseError(f"truncated payload: expected {expected} bytes, got {actual}", pos)
    if actual > expected:
        logger.warning("ignoring %d trailing bytes after graymap payload", actual - expected)
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos).reshape(height, width).copy()


def save_raster(raster: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pgm(raster))


def load_raster(path: PathLike) -> np.ndarray:
    """Raster values in [0, 1] as float32."""
    return decode_pgm(Path(path).read_bytes()).astype(np.float32) / 255.0


def save_mask(mask: np.ndarray, path: PathLike) -> None:
    save_raster((np.asarray(mask) > 0).astype(np.uint8) * 255, path)


def load_mask(path: PathLike) -> np.ndarray:
    return (decode_pgm(Path(path).read_bytes()) > 127).astype(np.uint8)
