"""Binary tensor blobs (PTW1 weights, checkpoint payloads) and atomic writes.

PTW1 layout, all integers little-endian::

    b"PTW1"
    u32  tensor count
    per tensor:
        u16  name length in bytes
        ...  UTF-8 name
        u8   rank
        u32  dims[rank]
        f32  data, row-major

Checkpoints reuse the same per-tensor layout with ``f64`` data (see
:mod:`promptcl.engine`) so a resumed run continues bit for bit.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

PTW1_MAGIC = b"PTW1"
_MAX_DIM = 1 << 28


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to a sibling temp file, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack_tensors(tensors: dict[str, np.ndarray], dtype: str = "<f4") -> bytes:
    """Serialize named arrays in the PTW1 per-tensor layout (no magic)."""
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name} has rank {arr.ndim} > 255")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def unpack_tensors(buf: bytes, pos: int = 0, dtype: str = "<f4") -> tuple[dict[str, np.ndarray], int]:
    """Inverse of :func:`pack_tensors`; returns the arrays and the end offset."""
    rd = _Reader(buf, pos)
    (count,) = rd.unpack("<I", "tensor count")
    itemsize = np.dtype(dtype).itemsize
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = rd.pos
        (nlen,) = rd.unpack("<H", "name length")
        try:
            name = rd.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start) from None
        (rank,) = rd.unpack("<B", "rank")
        dims = rd.unpack(f"<{rank}I", "dims")
        n = 1
        for d in dims:
            n *= d
            if n > _MAX_DIM:
                raise FormatError(f"tensor {name!r} is implausibly large", rd.pos)
        data = rd.take(n * itemsize, f"data of {name!r}")
        arr = np.frombuffer(data, dtype=dtype).astype(np.float64).reshape(dims)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        tensors[name] = arr
    return tensors, rd.pos


def write_ptw1(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, PTW1_MAGIC + pack_tensors(tensors, "<f4"))


def read_ptw1(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != PTW1_MAGIC:
        raise FormatError("bad magic, expected b'PTW1'", 0)
    tensors, end = unpack_tensors(buf, 4, "<f4")
    if end != len(buf):
        raise FormatError("trailing bytes after last tensor", end)
    return tensors
