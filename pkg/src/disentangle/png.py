"""Minimal PNG writer: 8-bit grayscale or RGB, no interlacing."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def to_bytes8(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with ``round(255 * v)``; layout (H, W) or (H, W, 3)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] == 1:
            img = img[0]
        elif img.shape[0] == 3:
            img = img.transpose(1, 2, 0)
        else:
            raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")
    if img.ndim not in (2, 3):
        raise ValueError(f"expected a (H, W) or (C, H, W) image, got shape {img.shape}")
    if np.isnan(img).any() or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return np.round(255.0 * img).astype(np.uint8)


def png_bytes(image) -> bytes:
    if hasattr(image, "raster"):
        image = image.raster()
    px = to_bytes8(image)
    h, w = px.shape[:2]
    color_type = 0 if px.ndim == 2 else 2
    rows = px.reshape(h, -1)
    # filter type 0 (None) before every scanline
    raw = np.concatenate([np.zeros((h, 1), dtype=np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def encode_png(image, path) -> Path:
    """Write ``image`` (array in [0, 1] or anything with ``raster()``) as a PNG file."""
    path = Path(path)
    data = png_bytes(image)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write PNG to {path}: {exc.strerror or exc}") from exc
    return path
