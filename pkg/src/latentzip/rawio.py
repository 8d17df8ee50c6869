"""Raw tensor file format for ingestion: a small self-describing header
followed by row-major values.

    magic "RTF1" | version u16 | dtype_bits u8 | V,T,H,W u32 x4 |
    n_names u16 | per name: len u16 + utf-8 | payload (little-endian)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .fields import ScalarField

__all__ = ["write_raw", "read_raw"]

MAGIC = b"RTF1"
VERSION = 1


def write_raw(field: ScalarField, path) -> int:
    dtype = "<f4" if field.dtype_bits == 32 else "<f8"
    parts = [MAGIC, struct.pack("<HB", VERSION, field.dtype_bits),
             struct.pack("<IIII", *field.shape)]
    parts.append(struct.pack("<H", len(field.var_names)))
    for name in field.var_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.ascontiguousarray(field.data, dtype=dtype).tobytes())
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


def read_raw(path) -> ScalarField:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file {path}")
    data = path.read_bytes()
    if len(data) < 4 + 3 + 16 + 2 or data[:4] != MAGIC:
        raise DataError(f"{path} is not a raw tensor file")
    version, dtype_bits = struct.unpack_from("<HB", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported raw tensor version {version}")
    dims = struct.unpack_from("<IIII", data, 7)
    pos = 23
    (n_names,) = struct.unpack_from("<H", data, pos)
    pos += 2
    names = []
    for _ in range(n_names):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        names.append(data[pos:pos + n].decode("utf-8"))
        pos += n
    count = int(np.prod(dims))
    dtype = "<f4" if dtype_bits == 32 else "<f8"
    expect = count * (dtype_bits // 8)
    payload = data[pos:]
    if len(payload) != expect:
        raise DataError(
            f"payload of {len(payload)} bytes does not match declared "
            f"{count} elements ({expect} bytes)"
        )
    values = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return ScalarField(data=values.copy(), var_names=names, dtype_bits=dtype_bits)
