"""Versioned binary container for named float64 arrays (``.hrmod``).

Layout (little-endian)::

    0   8 bytes  magic b"HRMODEL\\0"
    8   uint32   format version (currently 1)
    12  uint32   header length h
    16  h bytes  UTF-8 JSON: {"kind": str, "meta": {...}, "arrays": [[name, shape], ...]}
    ..  float64  arrays in header order, row-major
    end uint32   CRC32 of every preceding byte

Used for POD bases, TPWL models and PANN checkpoints; snapshot data use
``.hrsnap`` (see :mod:`hyperrom.dataset`).
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HRMODEL\x00"
VERSION = 1


def save_arrays(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in arrays.items()}
    header = json.dumps({"kind": kind, "meta": meta or {},
                         "arrays": [[k, list(v.shape)] for k, v in arrays.items()]},
                        sort_keys=True).encode()
    payload = b"".join([MAGIC, struct.pack("<II", VERSION, len(header)), header,
                        *(v.tobytes() for v in arrays.values())])
    path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    return path


def load_arrays(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not an .hrmod container")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) < 16 + hlen + 4:
        raise FormatError(f"{path}: truncated header")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if crc != zlib.crc32(raw[:-4]):
        raise FormatError(f"{path}: checksum mismatch or truncated")
    try:
        header = json.loads(raw[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    off = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=int))
        if off + 8 * count > len(raw) - 4:
            raise FormatError(f"{path}: truncated payload")
        arrays[name] = np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(float)
        off += 8 * count
    if off != len(raw) - 4:
        raise FormatError(f"{path}: trailing bytes")
    return arrays, header["meta"]
