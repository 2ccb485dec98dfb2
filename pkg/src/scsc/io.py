"""On-disk formats: ``.cscd`` dictionaries, run manifests and filter mosaics.

``.cscd`` layout (all little-endian)::

    offset  size        field
    0       4           magic b"CSCD"
    4       2           format version (u16, currently 1)
    6       4           K, number of filters (u32)
    10      4           m, filter side (u32)
    14      8*K*m*m     float64 coefficients, filter-major, row-major within a filter
    ...     4           CRC32 of the coefficient block (u32)
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CSCD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_CRC = struct.Struct("<I")


class CorruptFileError(ValueError):
    pass


def dictionary_to_bytes(filters):
    filters = np.asarray(filters, dtype="<f8")
    if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
        raise ValueError(f"filters must have shape (K, m, m), got {filters.shape}")
    K, m, _ = filters.shape
    payload = np.ascontiguousarray(filters).tobytes()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, K, m) + payload + _CRC.pack(zlib.crc32(payload))


def dictionary_from_bytes(blob):
    if len(blob) < _HEADER.size + _CRC.size:
        raise CorruptFileError("file too short for a .cscd header")
    magic, version, K, m = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported format version {version}")
    n = 8 * K * m * m
    if len(blob) != _HEADER.size + n + _CRC.size:
        raise CorruptFileError(f"expected {_HEADER.size + n + _CRC.size} bytes, got {len(blob)}")
    payload = blob[_HEADER.size : _HEADER.size + n]
    (crc,) = _CRC.unpack_from(blob, _HEADER.size + n)
    if crc != zlib.crc32(payload):
        raise CorruptFileError("CRC mismatch")
    return np.frombuffer(payload, dtype="<f8").reshape(K, m, m).astype(np.float64)


def write_dictionary(path, filters):
    Path(path).write_bytes(dictionary_to_bytes(filters))


def read_dictionary(path):
    return dictionary_from_bytes(Path(path).read_bytes())


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def filter_mosaic(filters, scale=4, gap=1):
    """Tile filters in a ceil(sqrt(K)) grid, each min-max normalized independently."""
    filters = np.asarray(filters)
    K, m, _ = filters.shape
    cols = math.ceil(math.sqrt(K))
    rows = math.ceil(K / cols)
    cell = m * scale
    out = np.ones((rows * (cell + gap) + gap, cols * (cell + gap) + gap))
    for k, f in enumerate(filters):
        lo, hi = f.min(), f.max()
        tile = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
        tile = np.kron(tile, np.ones((scale, scale)))
        r, c = divmod(k, cols)
        y, x = gap + r * (cell + gap), gap + c * (cell + gap)
        out[y : y + cell, x : x + cell] = tile
    return out


def save_mosaic(path, filters, scale=4):
    from .core import save_image

    save_image(path, filter_mosaic(filters, scale))
