"""WAVELGN1 container: one file format for template banks, scaler sets and checkpoints.

Layout::

    8 bytes   magic b"WAVELGN1"
    8 bytes   little-endian uint64 length n of the metadata block
    n bytes   UTF-8 JSON metadata (format_version, kind, manifest, ...)
    payload   float32 little-endian, tensors concatenated in manifest order
    4 bytes   little-endian CRC-32 of the payload

The manifest is a list of ``[name, shape]`` pairs.  The metadata also carries
``header_crc32``, a CRC-32 of the canonical JSON of every other metadata key,
so corruption in the metadata block is caught as well as in the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, FormatError, TruncatedError, VersionError

MAGIC = b"WAVELGN1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


def dumps_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(kind: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    header = dict(meta or {})
    header.pop("header_crc32", None)
    header.update({"format_version": FORMAT_VERSION, "kind": kind, "manifest": manifest})
    header["header_crc32"] = zlib.crc32(dumps_json(header))
    hbytes = dumps_json(header)
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in tensors.values()
    )
    return MAGIC + _LEN.pack(len(hbytes)) + hbytes + payload + _CRC.pack(zlib.crc32(payload))


def decode(data: bytes, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:8]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise TruncatedError("file ends inside the metadata length field")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + hlen:
        raise TruncatedError(f"metadata block needs {hlen} bytes, file has {len(data) - pos}")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("metadata must be a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {version!r}, this reader handles {FORMAT_VERSION}")
    if dumps_json(header) != data[pos : pos + hlen]:
        raise FormatError("metadata block is not in canonical form")
    pos += hlen
    stored_crc = header.pop("header_crc32", None)
    if stored_crc != zlib.crc32(dumps_json(header)):
        raise ChecksumError("metadata CRC-32 mismatch")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise FormatError(f"expected a {expect_kind!r} container, got {header.get('kind')!r}")
    manifest = header.get("manifest")
    if not isinstance(manifest, list):
        raise FormatError("metadata has no manifest")
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in manifest]
    nbytes = 4 * sum(sizes)
    if len(data) < pos + nbytes + _CRC.size:
        raise TruncatedError(
            f"payload truncated: need {nbytes + _CRC.size} bytes after metadata, have {len(data) - pos}"
        )
    if len(data) > pos + nbytes + _CRC.size:
        raise FormatError(f"{len(data) - pos - nbytes - _CRC.size} unexpected trailing bytes")
    payload = data[pos : pos + nbytes]
    (crc,) = _CRC.unpack_from(data, pos + nbytes)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"payload CRC-32 mismatch (stored {crc:#010x}, computed {zlib.crc32(payload):#010x})")
    tensors: dict[str, np.ndarray] = {}
    off = 0
    for (name, shape), size in zip(manifest, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=off).astype(np.float32)
        tensors[name] = arr.reshape(shape)
        off += 4 * size
    meta = {k: v for k, v in header.items() if k != "manifest"}
    return meta, tensors


def write(path, kind: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(kind, tensors, meta))


def read(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    return decode(data, expect_kind)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
