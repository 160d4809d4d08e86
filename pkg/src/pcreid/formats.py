from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .models import PointCloud

LPC_MAGIC = b"LPC1"
_header = struct.Struct("<4sI")
_point_dtype = np.dtype("<f4")


def encode_lpc(cloud: PointCloud) -> bytes:
    payload = np.ascontiguousarray(cloud.points, dtype=_point_dtype).tobytes()
    return _header.pack(LPC_MAGIC, len(cloud)) + payload


def decode_lpc(data: bytes) -> PointCloud:
    if len(data) < _header.size:
        raise InvalidInputError("truncated .lpc header")

    magic, count = _header.unpack_from(data)
    if magic != LPC_MAGIC:
        raise InvalidInputError(f"not an .lpc file (magic bytes {magic!r})")

    expected = _header.size + count * 3 * _point_dtype.itemsize
    if len(data) != expected:
        raise InvalidInputError(
            f".lpc payload size mismatch: header declares {count} points "
            f"({expected} bytes), file has {len(data)} bytes"
        )

    points = np.frombuffer(data, dtype=_point_dtype, offset=_header.size)
    return PointCloud(points.reshape(count, 3).astype(np.float64))


def read_lpc(path: Path | str) -> PointCloud:
    return decode_lpc(Path(path).read_bytes())


def write_lpc(path: Path | str, cloud: PointCloud) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_lpc(cloud))
