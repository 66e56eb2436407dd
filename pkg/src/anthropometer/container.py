"""Versioned binary container for named arrays plus JSON metadata.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ANTHBLOB"
    8       4     u32 format version (1)
    12      4     u32 header length H
    16      H     UTF-8 JSON header
    16+H    ...   tensor data, concatenated

The header is ``{"kind": str, "meta": {...}, "tensors": [{"name", "dtype",
"shape", "offset", "nbytes"}, ...]}``. ``dtype`` is a numpy type string with
explicit byte order (``"<f4"``, ``"<f8"``, ``"<i8"``); ``offset`` counts from
the first data byte. Data is stored C-contiguous (row-major).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ANTHBLOB"
VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i8", "<i4", "|u1"}


class ContainerError(ValueError):
    pass


def _canonical_dtype(a: np.ndarray) -> np.dtype:
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|",) else a.dtype
    if dt.str not in _ALLOWED:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    return dt


def encode(kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = _canonical_dtype(a)
        raw = np.ascontiguousarray(a, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)


def decode(data: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return (arrays, meta). Raises ContainerError on any malformed input."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise ContainerError("not an array container (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if 16 + hlen > len(data):
        raise ContainerError("truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}")
    body = memoryview(data)[16 + hlen:]
    arrays = {}
    for t in header["tensors"]:
        if t["dtype"] not in _ALLOWED:
            raise ContainerError(f"unsupported dtype {t['dtype']}")
        dt = np.dtype(t["dtype"])
        shape = tuple(int(s) for s in t["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if n != t["nbytes"] or t["offset"] + n > len(body):
            raise ContainerError(f"tensor {t['name']!r}: size/offset inconsistent or truncated")
        arrays[t["name"]] = np.frombuffer(body[t["offset"]:t["offset"] + n], dtype=dt).reshape(shape).copy()
    return arrays, header.get("meta", {})


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(kind, arrays, meta))


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return decode(p.read_bytes(), kind)
