"""Reader and writer for the subset of the NPY v1.0 format used by archives.

Only C-ordered, little-endian ``<f4``, ``<f8`` and ``<i8`` arrays are
accepted. Anything else is rejected instead of converted.
"""
from __future__ import annotations

import ast
import struct
from pathlib import Path

import numpy as np

from .exceptions import MalformedHeader, SizeMismatch, UnsupportedDtype

MAGIC = b"\x93NUMPY"
VERSION = b"\x01\x00"
ALIGN = 64

SUPPORTED_DTYPES = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "<i8": np.dtype("<i8"),
}


def _descr(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    for descr, supported in SUPPORTED_DTYPES.items():
        if dtype == supported or dtype == supported.newbyteorder("="):
            return descr
    raise UnsupportedDtype(f"unsupported dtype {dtype!r}; expected float32, float64 or int64")


def _header_text(descr: str, shape: tuple[int, ...]) -> str:
    return "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(shape))


def write_npy(tensor) -> bytes:
    """Serialize ``tensor`` as NPY v1.0 bytes.

    The header is space padded so that magic, version, length field and
    header together occupy a multiple of 64 bytes.
    """
    arr = np.asarray(tensor)
    descr = _descr(arr.dtype)
    header = _header_text(descr, arr.shape).encode("latin1")
    # 6 magic + 2 version + 2 length + header + "\n"
    pad = -(len(MAGIC) + len(VERSION) + 2 + len(header) + 1) % ALIGN
    header = header + b" " * pad + b"\n"
    if len(header) > 0xFFFF:
        raise MalformedHeader("header too long for NPY v1.0")
    payload = np.ascontiguousarray(arr, dtype=SUPPORTED_DTYPES[descr]).tobytes(order="C")
    return MAGIC + VERSION + struct.pack("<H", len(header)) + header + payload


def read_npy(data: bytes) -> np.ndarray:
    """Parse NPY v1.0 bytes into a numpy array.

    Raises:
        MalformedHeader: bad magic, version, or header dictionary, or
            ``fortran_order=True``.
        UnsupportedDtype: dtype outside ``<f4``, ``<f8``, ``<i8``.
        SizeMismatch: payload length differs from the declared shape.
    """
    data = bytes(data)
    if len(data) < 10 or data[:6] != MAGIC:
        raise MalformedHeader("missing \\x93NUMPY magic")
    if data[6:8] != VERSION:
        raise MalformedHeader(f"unsupported format version {data[6]}.{data[7]}")
    (hlen,) = struct.unpack("<H", data[8:10])
    if len(data) < 10 + hlen:
        raise MalformedHeader("truncated header")
    raw = data[10 : 10 + hlen]
    if not raw.endswith(b"\n"):
        raise MalformedHeader("header not terminated by newline")
    try:
        header = ast.literal_eval(raw.decode("latin1"))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise MalformedHeader(f"unparseable header: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeader("header must hold exactly descr, fortran_order and shape")

    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise MalformedHeader(f"invalid shape {shape!r}")
    if header["fortran_order"] is not False:
        raise MalformedHeader("fortran_order=True is not supported")
    descr = header["descr"]
    if not isinstance(descr, str) or descr not in SUPPORTED_DTYPES:
        raise UnsupportedDtype(f"unsupported dtype {descr!r}")

    dtype = SUPPORTED_DTYPES[descr]
    count = int(np.prod(shape, dtype=np.int64))
    payload = data[10 + hlen :]
    if len(payload) != count * dtype.itemsize:
        raise SizeMismatch(
            f"payload has {len(payload)} bytes, shape {shape} needs {count * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(shape).copy()


def save_npy(path, tensor) -> None:
    Path(path).write_bytes(write_npy(tensor))


def load_npy(path) -> np.ndarray:
    return read_npy(Path(path).read_bytes())
