"""Shared helpers for the binary artifact formats."""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Any, BinaryIO

from .errors import FormatError

_LEN = struct.Struct("<I")


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def digest_of(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def write_meta(fh: BinaryIO, meta: dict | None) -> None:
    """Length-prefixed canonical JSON block (seed, config digest, ...)."""
    blob = canonical_json(meta or {})
    fh.write(_LEN.pack(len(blob)))
    fh.write(blob)


def read_meta(data: bytes, offset: int) -> tuple[dict, int]:
    if offset + _LEN.size > len(data):
        raise FormatError("truncated metadata block")
    (n,) = _LEN.unpack_from(data, offset)
    offset += _LEN.size
    if offset + n > len(data):
        raise FormatError("truncated metadata block")
    try:
        meta = json.loads(data[offset:offset + n])
    except ValueError as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from None
    return meta, offset + n


def check_magic(data: bytes, magic: bytes, version: int, got_version: int, what: str) -> None:
    if data[:4] != magic:
        raise FormatError(f"{what}: bad magic {data[:4]!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"{what}: unsupported version {got_version}")
