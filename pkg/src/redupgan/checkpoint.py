"""Binary container for named tensors: magic, version, entries, trailing CRC.

Layout (all integers little-endian, raw tensor bytes little-endian too)::

    magic   8 bytes  b"REDUPNN\\0"
    version u32
    count   u32
    entry*  u16 name_len | name utf-8 | u8 dtype code | u8 ndim | u32 dims... | raw data
    crc     u32  zlib.crc32 over everything after the magic

Round-trips are bit-exact; a bad magic, truncation, or CRC mismatch raises
:class:`CheckpointError`.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"REDUPNN\0"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8", 4: "|u1", 5: "<u8"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    """Unreadable or corrupt tensor container."""


def save_tensors(path, tensors: dict) -> None:
    """Write ``{name: ndarray}`` to ``path`` (little-endian, CRC-protected)."""
    body = bytearray()
    body += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        key = np.dtype(dt.str.replace(">", "<"))
        if key not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr.astype(key, copy=False)).tobytes()
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<BB", _CODES[key], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += raw
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    Path(path).write_bytes(MAGIC + bytes(body) + struct.pack("<I", crc))


def load_tensors(path) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    body, (crc,) = blob[len(MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CheckpointError(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = take(f"<{ndim}I")
        dt = np.dtype(_DTYPES[code])
        nelems = int(np.prod(shape, dtype=np.int64))
        nbytes = nelems * dt.itemsize
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(body, dtype=dt, count=nelems, offset=off).reshape(shape)
        off += nbytes
        out[name] = arr.copy()
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in container")
    return out


def pack_json(obj) -> np.ndarray:
    """Encode a JSON-serializable object as a uint8 tensor."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
