"""Binary container for named arrays plus a JSON metadata block.

Layout (all integers little-endian)::

    b"RBACKPT1"                       magic, 8 bytes
    u32   format version
    u64   metadata length L, then L bytes of UTF-8 JSON
    u32   tensor count T
    T x   u16 name length, name (UTF-8), u8 dtype code, u8 rank,
          rank x u64 extents, u64 byte offset into the payload
    u64   payload length P, then P bytes of raw little-endian data

Tensors are stored back to back in directory order. Checkpoints and
preprocessed tensors share this format.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerError

MAGIC = b"RBACKPT1"
VERSION = 1

DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1", 5: "<i4"}
_CODE_OF = {np.dtype(v).str: k for k, v in DTYPE_CODES.items()}


def dumps_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def encode_container(meta: dict, arrays: dict) -> bytes:
    directory = [struct.pack("<I", len(arrays))]
    payload = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = _CODE_OF.get(np.dtype(le).str)
        if code is None:
            raise ContainerError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
        nb = name.encode("utf-8")
        directory.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        directory.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", offset))
        payload.append(blob)
        offset += len(blob)
    meta_bytes = dumps_json(meta)
    body = b"".join(payload)
    return b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes,
                     *directory, struct.pack("<Q", len(body)), body])


def write_container(path, meta: dict, arrays: dict):
    Path(path).write_bytes(encode_container(meta, arrays))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.buf):
            raise ContainerError(f"truncated or corrupt container while reading {what} "
                                 f"(need {n} bytes at {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(buf: bytes):
    r = _Reader(buf)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ContainerError(f"format version {version} is not supported (expected {VERSION})")
    (meta_len,) = r.unpack("<Q", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"metadata block is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        code, rank = r.unpack("<BB", f"tensor {name!r} dtype/rank")
        if code not in DTYPE_CODES:
            raise ContainerError(f"tensor {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"tensor {name!r} extents") if rank else ()
        (offset,) = r.unpack("<Q", f"tensor {name!r} offset")
        entries.append((name, np.dtype(DTYPE_CODES[code]), shape, offset))
    (plen,) = r.unpack("<Q", "payload length")
    payload = r.take(plen, "payload")
    if r.pos != len(buf):
        raise ContainerError(f"{len(buf) - r.pos} trailing bytes after payload")
    arrays = {}
    expected = 0
    for name, dtype, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset != expected or offset + nbytes > plen:
            raise ContainerError(f"tensor {name!r}: directory says offset {offset}, size {nbytes}, "
                                 f"inconsistent with payload of {plen} bytes")
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                     offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
        expected = offset + nbytes
    if expected != plen:
        raise ContainerError(f"payload has {plen - expected} unaccounted bytes")
    return meta, arrays


def read_container(path):
    return decode_container(Path(path).read_bytes())
