"""
Dense NCHW tensors and the primitive array operations the network layers build on.

Tensors are plain ``numpy.ndarray`` objects in one of three precisions. Half
precision is a storage format: reductions and products are carried out in
float32 and the result is rounded back to float16, which mirrors what GPU
tensor cores do (an f16 x f16 product is exact in f32).

The raw on-disk layout ("TKTN") is::

    magic  b"TKTN"        4 bytes
    version               u32 little-endian
    dtype code            u8   (0=f32, 1=f16, 2=f64)
    rank                  u8
    extents               rank x u64 little-endian
    data                  little-endian, row-major
"""

from __future__ import annotations

import enum
import io
import os
import struct
from typing import BinaryIO, Sequence, Union

import numpy as np

TENSOR_MAGIC = b"TKTN"
TENSOR_VERSION = 1

_debug_checks = os.environ.get("TAKUNET_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


class Precision(str, enum.Enum):
    F16 = "f16"
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self])

    @property
    def accumulator(self) -> np.dtype:
        """dtype used for reductions and dot products."""
        return np.dtype(np.float64 if self is Precision.F64 else np.float32)

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def of(cls, x: Union[np.ndarray, np.dtype, str, "Precision"]) -> "Precision":
        if isinstance(x, Precision):
            return x
        if isinstance(x, str) and x in cls._value2member_map_:
            return cls(x)
        dt = np.dtype(x.dtype if isinstance(x, np.ndarray) else x)
        for p, d in _DTYPES.items():
            if np.dtype(d) == dt:
                return p
        raise TypeError(f"unsupported dtype {dt}")

    @classmethod
    def from_code(cls, code: int) -> "Precision":
        for p, c in _CODES.items():
            if c == code:
                return p
        raise ValueError(f"unknown dtype code {code}")


_DTYPES = {Precision.F16: np.float16, Precision.F32: np.float32, Precision.F64: np.float64}
_CODES = {Precision.F32: 0, Precision.F16: 1, Precision.F64: 2}


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf checks after every op in this module and in ``ops``."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_enabled() -> bool:
    return _debug_checks


def check_finite(x: np.ndarray, op: str = "op") -> np.ndarray:
    if _debug_checks and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return x


def compute_dtype(x: np.ndarray) -> np.dtype:
    """Accumulation dtype for an array's precision (f16 -> f32)."""
    return np.dtype(np.float32) if x.dtype == np.float16 else x.dtype


# -- constructors -----------------------------------------------------------

def zeros(shape: Sequence[int], precision: Precision = Precision.F32) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=Precision.of(precision).dtype)


def full(shape: Sequence[int], value: float, precision: Precision = Precision.F32) -> np.ndarray:
    return np.full(tuple(shape), value, dtype=Precision.of(precision).dtype)


def copy(x: np.ndarray) -> np.ndarray:
    return np.array(x, copy=True, order="C")


def slice_channels(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    if not 0 <= start <= stop <= x.shape[1]:
        raise IndexError(f"channel slice [{start}, {stop}) out of range for {x.shape[1]} channels")
    return np.ascontiguousarray(x[:, start:stop])


# -- elementwise / channel ops ----------------------------------------------

def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s along axis 1."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return np.concatenate([a, b], axis=1)


def cast(x: np.ndarray, to: Union[Precision, str]) -> np.ndarray:
    """Convert precision; narrowing rounds to nearest even (IEEE default)."""
    return np.asarray(x).astype(Precision.of(to).dtype)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return check_finite(a + b, "add")


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return check_finite((x.astype(compute_dtype(x)) * s).astype(x.dtype), "scale")


def _per_channel(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    v = np.asarray(v).reshape(-1)
    if v.size != x.shape[1]:
        raise ValueError(f"expected {x.shape[1]} channel values, got {v.size}")
    return v.reshape((1, -1) + (1,) * (x.ndim - 2))


def channel_mul(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = x.astype(compute_dtype(x)) * _per_channel(v, x)
    return check_finite(out.astype(x.dtype), "channel_mul")


def channel_add(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = x.astype(compute_dtype(x)) + _per_channel(v, x)
    return check_finite(out.astype(x.dtype), "channel_add")


def mean(x: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    out = np.mean(x, axis=axis, dtype=compute_dtype(x), keepdims=keepdims)
    return check_finite(out.astype(x.dtype), "mean")


def channel_l2_norms(x: np.ndarray) -> np.ndarray:
    """Per (sample, channel) L2 norm over the spatial plane -> (N, C, 1, 1)."""
    if x.ndim != 4:
        raise ValueError("channel_l2_norms expects a 4-D tensor")
    xa = x.astype(compute_dtype(x))
    out = np.sqrt(np.sum(xa * xa, axis=(2, 3), keepdims=True))
    return check_finite(out.astype(x.dtype), "channel_l2_norms")


# -- raw tensor format ------------------------------------------------------

def write_tensor(f: BinaryIO, x: np.ndarray) -> None:
    x = np.asarray(x)
    p = Precision.of(x)
    if x.ndim > 255:
        raise ValueError("rank too large")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<IBB", TENSOR_VERSION, p.code, x.ndim))
    f.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    f.write(np.ascontiguousarray(x, dtype=p.dtype.newbyteorder("<")).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise EOFError(f"truncated tensor data: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<IBB", _read_exact(f, 6))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    p = Precision.from_code(code)
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    dt = p.dtype.newbyteorder("<")
    raw = _read_exact(f, count * dt.itemsize)
    return np.frombuffer(raw, dtype=dt).astype(p.dtype).reshape(shape)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path: Union[str, os.PathLike], x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
