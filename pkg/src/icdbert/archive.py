"""Versioned named-tensor archive.

Layout (all integers little-endian)::

    magic        8 bytes   b"ICDBARC\\0"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       JSON, UTF-8, sorted keys:
                   {"kind": str, "meta": {...},
                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      raw C-order tensor bytes, concatenated in header order
    digest       32 bytes  SHA-256 of every preceding byte

Identical inputs produce identical bytes. Used for tokenized datasets and
model checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ICDBARC\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32


class ArchiveError(ValueError):
    pass


class CorruptArchiveError(ArchiveError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


def write_archive(
    path: str | os.PathLike,
    kind: str,
    tensors: Mapping[str, np.ndarray],
    meta: Mapping | None = None,
) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(value)
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        data = array.tobytes()
        entries.append({
            "name": name,
            "dtype": array.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"kind": kind, "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    payload = body + hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_archive(
    path: str | os.PathLike, kind: str | None = None
) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)``; raises on bad magic, version, kind or checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + _DIGEST_SIZE:
        raise CorruptArchiveError(f"{path}: truncated archive ({len(raw)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptArchiveError(f"{path}: not an archive (bad magic)")
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(
            f"{path}: archive format version {version}, this build reads {FORMAT_VERSION}"
        )
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptArchiveError(f"{path}: checksum mismatch (truncated or modified)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"{path}: unreadable header: {exc}") from None
    if kind is not None and header["kind"] != kind:
        raise ArchiveError(f"{path}: expected a {kind!r} archive, found {header['kind']!r}")
    data_start = start + header_len
    tensors = {}
    for entry in header["tensors"]:
        begin = data_start + entry["offset"]
        chunk = body[begin:begin + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = array.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
