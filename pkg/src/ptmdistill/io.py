"""Binary container shared by checkpoints and datasets.

Layout (all integers little-endian)::

    magic      6 bytes  b"PTMDD\\x00"
    version    uint16
    kind       uint16-length-prefixed UTF-8 ("checkpoint", "dataset", ...)
    header     uint32-length-prefixed UTF-8 JSON record
    count      uint32   number of arrays
    arrays     count x (name, dtype code, ndim, dims, raw little-endian values)

Float arrays are stored as ``<f8`` and integer arrays as ``<i8`` so a
write/read cycle is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"PTMDD\x00"
VERSION = 1
_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8")}


class FormatError(ValueError):
    """The file is not a valid container or has the wrong kind."""


def _pack_str(fmt: str, text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def encode(kind: str, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _pack_str("<H", kind)]
    parts.append(_pack_str("<I", json.dumps(header, sort_keys=True)))
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = b"i" if np.issubdtype(arr.dtype, np.integer) else b"f"
        arr = np.array(arr, dtype=_DTYPES[code], order="C")
        parts.append(_pack_str("<H", name))
        parts.append(code)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated container")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")


def decode(buf: bytes, expect_kind: str | None = None):
    """Return ``(kind, header, arrays)`` from container bytes."""
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("bad magic bytes")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    kind = r.string("<H")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind!r} file, found {kind!r}")
    header = json.loads(r.string("<I"))
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string("<H")
        code = r.take(1)
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r} for {name!r}")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(n * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(np.float64 if code == b"f" else np.int64)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last array")
    return kind, header, arrays


def write(path, kind: str, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(kind, header, arrays))
    return path


def read(path, expect_kind: str | None = None):
    return decode(Path(path).read_bytes(), expect_kind)


def write_manifest(path, entries: Mapping[str, Any]) -> Path:
    """Human-readable ``key = value`` manifest, one entry per line, sorted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(entries.items())]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, Any]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, value = line.partition(" = ")
        out[key.strip()] = json.loads(value)
    return out
