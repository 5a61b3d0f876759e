import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oodguard.exceptions import MalformedHeader, SizeMismatch, UnsupportedDtype
from oodguard.npy import read_npy, write_npy


def build(header: str, payload: bytes = b"") -> bytes:
    raw = header.encode("latin1")
    pad = -(10 + len(raw) + 1) % 64
    raw = raw + b" " * pad + b"\n"
    return b"\x93NUMPY\x01\x00" + struct.pack("<H", len(raw)) + raw + payload


def test_hand_built_scalar_f8():
    data = build("{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }", struct.pack("<d", 0.0))
    arr = read_npy(data)
    assert arr.shape == (1,)
    assert arr.dtype == np.float64
    assert arr.tolist() == [0.0]


def test_fortran_order_rejected():
    data = build("{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }", b"\0" * 8)
    with pytest.raises(MalformedHeader):
        read_npy(data)


def test_bad_magic_rejected():
    data = build("{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }", b"\0" * 8)
    with pytest.raises(MalformedHeader):
        read_npy(b"\x93NUMPZ" + data[6:])


def test_bad_version_rejected():
    data = bytearray(build("{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }", b"\0" * 8))
    data[6] = 2
    with pytest.raises(MalformedHeader):
        read_npy(bytes(data))


def test_truncated_payload_rejected():
    data = build("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }", b"\0" * 20)
    with pytest.raises(SizeMismatch):
        read_npy(data)


@pytest.mark.parametrize("descr", ["<i4", ">f8", "|u1", "<c16"])
def test_unsupported_dtypes(descr):
    data = build(f"{{'descr': '{descr}', 'fortran_order': False, 'shape': (1,), }}", b"\0" * 16)
    with pytest.raises(UnsupportedDtype):
        read_npy(data)


def test_garbage_header_rejected():
    with pytest.raises(MalformedHeader):
        read_npy(build("{'descr': '<f8', 'fortran_order': False, 'shape': (1,), 'extra': 1}"))
    with pytest.raises(MalformedHeader):
        read_npy(build("not a dict at all"))
    with pytest.raises(MalformedHeader):
        read_npy(b"\x93NUMPY")


def test_write_rejects_unsupported():
    with pytest.raises(UnsupportedDtype):
        write_npy(np.zeros(3, dtype=np.int32))


def test_payload_is_little_endian_concatenation():
    out = write_npy(np.array([1, 2, 3], dtype=np.float32))
    assert out[-12:] == struct.pack("<3f", 1, 2, 3)
    assert (len(out) - 12) % 64 == 0


def test_empty_tensor():
    out = write_npy(np.zeros((0,), dtype=np.float64))
    assert len(out) % 64 == 0
    back = read_npy(out)
    assert back.shape == (0,)


def test_header_is_64_aligned_and_newline_terminated():
    for shape in [(), (5,), (2, 3), (1, 2, 3, 4), (12345678, 0)]:
        out = write_npy(np.zeros(shape, dtype="<i8"))
        (hlen,) = struct.unpack("<H", out[8:10])
        assert (10 + hlen) % 64 == 0
        assert out[10 + hlen - 1 : 10 + hlen] == b"\n"


def test_two_by_three_roundtrip_bitwise():
    arr = np.arange(1, 7, dtype=np.float32).reshape(2, 3)
    back = read_npy(write_npy(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_interoperates_with_numpy():
    arr = np.random.default_rng(0).normal(size=(3, 4))
    buf = io.BytesIO()
    np.save(buf, arr)
    assert np.array_equal(read_npy(buf.getvalue()), arr)
    assert np.array_equal(np.load(io.BytesIO(write_npy(arr))), arr)


tensors = st.sampled_from(["<f4", "<f8", "<i8"]).flatmap(
    lambda dt: hnp.arrays(
        dtype=np.dtype(dt),
        shape=hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
        elements={"allow_nan": True} if dt != "<i8" else None,
    )
)


@settings(max_examples=200, deadline=None)
@given(tensors)
def test_roundtrip_property(arr):
    data = write_npy(arr)
    back = read_npy(data)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
    assert write_npy(back) == data
