"""Binary checkpoint container: named float arrays with a CRC32 trailer.

Layout (all integers little-endian):
  magic "PICN" | version u32 | entry count u32 |
  per entry: name length u32, UTF-8 name, dtype u8 (0=f32, 1=f64),
             rank u8, extents as u32 each, raw array payload |
  CRC32 u32 over every preceding byte.

Entries are written sorted by name so identical states produce identical
bytes. Text formats cannot guarantee float round trips; this one restores
training state bit-exactly.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"PICN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def save_arrays(path, entries: dict):
    """Write name -> float array pairs; returns the byte count."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        if arr.ndim > 4:
            raise CheckpointError(f"entry {name!r} has rank {arr.ndim} > 4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(chunks)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated reading {what} at offset {self.off}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_arrays(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != crc:
        raise CheckpointError(
            f"{path}: CRC mismatch over bytes [0, {len(body)}): stored {crc:#010x}, computed {actual:#010x}"
        )
    r = _Reader(body, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    count = r.u32("entry count")
    out = {}
    for _ in range(count):
        nlen = r.u32("name length")
        name = r.take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, f"{name} header"))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: entry {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} extents"))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(n * dt.itemsize, f"{name} payload")
        arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
        if name in out:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        out[name] = arr
    if r.off != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.off} trailing bytes after last entry")
    return out
