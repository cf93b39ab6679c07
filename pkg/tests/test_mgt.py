import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgdun import mgt


@settings(max_examples=30, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=4), seed=st.integers(0, 999))
def test_roundtrip_bit_exact(shape, seed):
    a = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    back = mgt.from_bytes(mgt.to_bytes(a))
    assert back.shape == mgt.as_nchw(a).shape
    assert back.tobytes() == mgt.as_nchw(a).tobytes()


def test_layout_is_little_endian():
    blob = mgt.to_bytes(np.array([[[[1.0, -2.0]]]], dtype=np.float32))
    assert blob[:4] == b"MGT1"
    assert struct.unpack("<4I", blob[4:20]) == (1, 1, 1, 2)
    assert struct.unpack("<2f", blob[20:]) == (1.0, -2.0)


def test_bad_inputs_rejected():
    blob = mgt.to_bytes(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(mgt.FormatError, match="magic"):
        mgt.from_bytes(b"XGT1" + blob[4:])
    with pytest.raises(mgt.FormatError, match="truncated"):
        mgt.from_bytes(blob[:-1])
    with pytest.raises(mgt.FormatError, match="trailing"):
        mgt.from_bytes(blob + b"\0")
    with pytest.raises(mgt.FormatError):
        mgt.to_bytes(np.zeros((1, 1, 1, 1, 1)))


def test_read_one_walks_a_sequence():
    a, b = np.ones((1, 1, 1, 3), np.float32), np.zeros((1, 2, 1, 1), np.float32)
    buf = mgt.to_bytes(a) + mgt.to_bytes(b)
    x, off = mgt.read_one(buf, 0)
    y, end = mgt.read_one(buf, off)
    assert np.array_equal(x, a) and np.array_equal(y, b) and end == len(buf)


def test_pgm16_export(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    mgt.write_pgm16(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    header = b"P5\n2 2\n65535\n"
    assert raw.startswith(header)
    vals = np.frombuffer(raw[len(header):], dtype=">u2")
    assert list(vals) == [0, 32768, 65535, 65535]
