"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import Tensor


class ImageFormatError(ValueError):
    """Malformed image file; the message names the byte offset."""


def _parse_header(raw: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if raw[:2] != magic:
        raise ImageFormatError(f"{path}: bad magic {raw[:2]!r} at offset 0, expected {magic!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header at offset {start}")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header at offset {pos}")
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255) at offset {start}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height}")
    return width, height, maxval, pos + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    width, height, _, offset = _parse_header(raw, magic, path)
    need = width * height * channels
    have = len(raw) - offset
    if have < need:
        raise ImageFormatError(
            f"{path}: truncated payload, expected {need} bytes from offset {offset}, got {have}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset)
    return pixels.reshape(height, width, channels)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_ppm_array(path) -> np.ndarray:
    """Return a (3, H, W) float64 array in [0, 1]."""
    return _read(path, b"P6", 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm_array(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    payload = quantize(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + payload)


def read_pgm_array(path) -> np.ndarray:
    """Return an (H, W) float64 array in [0, 1]."""
    return _read(path, b"P5", 1)[:, :, 0].astype(np.float64) / 255.0


def write_pgm_array(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + quantize(img).tobytes())


def read_ppm(path) -> Tensor:
    return Tensor(read_ppm_array(path)[None])


def write_ppm(path, image: Tensor) -> None:
    if image.shape[0] != 1:
        raise ValueError(f"write_ppm takes a single image (1, 3, H, W), got {image.shape}")
    write_ppm_array(path, image.data[0])
