from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from pcreid.errors import InvalidInputError
from pcreid.formats import LPC_MAGIC, decode_lpc, encode_lpc, read_lpc, write_lpc
from pcreid.models import PointCloud


def test_layout() -> None:
    data = encode_lpc(PointCloud([[1.0, 2.0, 3.0]]))
    assert data == LPC_MAGIC + struct.pack("<I3f", 1, 1.0, 2.0, 3.0)


def test_empty_cloud() -> None:
    data = encode_lpc(PointCloud(np.empty((0, 3))))
    assert len(data) == 8
    assert len(decode_lpc(data)) == 0


def test_file_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    cloud = PointCloud(rng.normal(size=(100, 3)).astype(np.float32))
    path = tmp_path / "nested" / "cloud.lpc"
    write_lpc(path, cloud)
    np.testing.assert_array_equal(read_lpc(path).points, cloud.points)


@pytest.mark.parametrize(
    "data, message",
    [
        pytest.param(b"LPC", "truncated", id="truncated"),
        pytest.param(b"PCD1" + struct.pack("<I", 0), "not an .lpc file", id="magic"),
        pytest.param(LPC_MAGIC + struct.pack("<I", 2) + bytes(12), "size mismatch", id="short"),
    ],
)
def test_malformed(data: bytes, message: str) -> None:
    with pytest.raises(InvalidInputError, match=message):
        decode_lpc(data)
