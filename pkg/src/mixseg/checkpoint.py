"""Binary tensor container for checkpoints.

Layout, all integers little-endian:

    magic   4 bytes  "GMNT"
    version u32      currently 1
    count   u32      number of tensors
    entry*  u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
            then prod(dims) float64 values, C order, little-endian

Entries are written sorted by name so identical state dicts produce
identical files. Parsing failures raise FormatError carrying the byte
offset of the first unusable byte.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"GMNT"
VERSION = 1


def save(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        if not 1 <= len(raw) <= 0xFFFF:
            raise FormatError(f"tensor name length {len(raw)} out of range")
        if arr.ndim > 0xFF:
            raise FormatError(f"rank {arr.ndim} too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", offset=0)
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_off = r.pos
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid UTF-8", offset=name_off + 2)
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", offset=name_off)
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = 1
        for d in dims:
            n *= d
        data = r.take(8 * n, f"data of {name!r}")
        out[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last tensor", offset=r.pos)
    return out
