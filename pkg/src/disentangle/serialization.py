"""Little-endian binary helpers shared by checkpoint and dataset containers.

A tensor record is: u16 name length, UTF-8 name, u8 rank, rank x u64 dims,
then the raw float64 little-endian payload.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class TruncatedError(ValueError):
    """The stream ended before a complete record was read."""


def read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedError(f"expected {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(f: BinaryIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", read_exact(f, 2))
    name = read_exact(f, nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", read_exact(f, 1))
    dims = struct.unpack(f"<{rank}Q", read_exact(f, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(read_exact(f, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def write_text_block(f: BinaryIO, text: str):
    raw = text.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def read_text_block(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", read_exact(f, 4))
    return read_exact(f, n).decode("utf-8")


def dump_kv(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out
