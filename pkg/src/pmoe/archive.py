"""PMWA weight archive: a flat, little-endian container of named dense arrays.

Layout::

    magic    4 bytes   b"PMWA"
    version  u32       1
    count    u32
    entry * count:
        name_len u32, name (UTF-8), dtype u8 (0=f32, 1=f64), rank u8,
        dims u64 * rank, raw little-endian elements

Text payloads (configs, manifests) are stored as rank-1 f64 arrays of UTF-8
byte values; see :func:`text_to_array`.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"PMWA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ArchiveFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a whole archive; nothing is returned unless every entry is valid."""
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveFormatError(f"truncated {what}: need {n} bytes, have {len(view) - pos}", pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ArchiveFormatError("bad magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveFormatError("entry name is not UTF-8", start) from None
        code_at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPES:
            raise ArchiveFormatError(f"unknown dtype code {code}", code_at)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        if name in out:
            raise ArchiveFormatError(f"duplicate entry {name!r}", start)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise ArchiveFormatError(f"{len(view) - pos} trailing bytes", pos)
    return out


def save_archive(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    data = encode(entries)
    with open(path, "wb") as fh:
        fh.write(data)


def load_archive(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def format_kv(pairs: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
