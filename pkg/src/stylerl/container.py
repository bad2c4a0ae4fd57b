"""Binary container for named float32 arrays.

Layout (all integers little-endian)::

    b"RLMS"  u32 version  u32 count
    repeated count times:
        u16 name_len  name (utf-8)  u8 ndim  u32 dims[ndim]  f32 payload[prod(dims)]
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"RLMS"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def encode_container(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise FormatError(f"duplicate array name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"array name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 0xFF:
            raise FormatError(f"{name!r} has too many dimensions")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    return buf.getvalue()


def decode_container(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("container truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not an RLMS container (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate array name {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        payload = np.frombuffer(take(4 * n), dtype=_LE_F32)
        out[name] = payload.astype(np.float32).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def write_container(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_container(arrays))
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read container {path}: {exc}") from exc
    return decode_container(blob)
