"""``BFNN`` parameter checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .. import _io
from ..errors import FormatError

MAGIC = b"BFNN"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def save_params(path: str | Path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Header, metadata block, then ``{name, ndim, shape, float64 payload}`` per tensor."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(params)))
        _io.write_meta(fh, meta)
        for name in sorted(params):
            arr = np.array(params[name], dtype="<f8", order="C")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    _, version, count = _HEADER.unpack_from(data)
    _io.check_magic(data, MAGIC, VERSION, version, str(path))
    meta, off = _io.read_meta(data, _HEADER.size)
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            name = data[off + 2: off + 2 + n].decode()
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).copy()
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return out, meta
