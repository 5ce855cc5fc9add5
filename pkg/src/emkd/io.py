"""Binary tensor, mask and model-container records.

All integers are little-endian.  Tensor record::

    b"EMKD" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | rank*u32 extents | payload

Mask file::

    b"EMKL" | u32 version=1 | u32 H | u32 W | u8 num_classes | H*W u8 class ids

Model container::

    b"EMKM" | u32 version=1 | u32 count | count * (u16 name_len | utf-8 name | tensor record)
"""

from __future__ import annotations

import struct
from os import PathLike
from typing import Dict, Tuple, Union

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"EMKD"
MASK_MAGIC = b"EMKL"
MODEL_MAGIC = b"EMKM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathType = Union[str, PathLike]


class FormatError(ValueError):
    """Malformed or truncated record; the message names the byte offset."""


class _Reader:
    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.origin}: truncated at offset {self.pos} reading {what} "
                f"({n} bytes needed, {len(self.buf) - self.pos} left)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected: bytes) -> None:
        at = self.pos
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"{self.origin}: bad magic {got!r} at offset {at}, expected {expected!r}")

    def version(self) -> None:
        at = self.pos
        (v,) = self.unpack("<I", "version")
        if v != VERSION:
            raise FormatError(f"{self.origin}: unsupported version {v} at offset {at}")


def encode_tensor(t, dtype: str = "f64") -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = {"f32": 0, "f64": 1}[dtype]
    head = TENSOR_MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _decode_tensor(r: _Reader) -> Tensor:
    r.magic(TENSOR_MAGIC)
    r.version()
    at = r.pos
    code, rank = r.unpack("<BB", "dtype/rank")
    if code not in _DTYPES:
        raise FormatError(f"{r.origin}: unknown dtype code {code} at offset {at}")
    shape = r.unpack(f"<{rank}I", "extents")
    count = int(np.prod(shape)) if rank else 1
    payload = r.take(count * _DTYPES[code].itemsize, "payload")
    arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape)
    return Tensor(arr.astype(np.float64))


def decode_tensor(buf: bytes, origin: str = "<bytes>") -> Tensor:
    r = _Reader(buf, origin)
    t = _decode_tensor(r)
    if r.pos != len(buf):
        raise FormatError(f"{origin}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return t


def write_tensor(path: PathType, t, dtype: str = "f64") -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t, dtype))


def read_tensor(path: PathType) -> Tensor:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), str(path))


def write_mask(path: PathType, mask: np.ndarray, num_classes: int) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    if mask.min() < 0 or mask.max() >= num_classes or num_classes > 255:
        raise ValueError(f"mask ids must lie in [0, {num_classes})")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<IIIB", VERSION, h, w, num_classes))
        fh.write(mask.astype(np.uint8).tobytes())


def read_mask(path: PathType) -> Tuple[np.ndarray, int]:
    """Return ``(mask[H, W] as int64, num_classes)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    r.magic(MASK_MAGIC)
    r.version()
    h, w, num_classes = r.unpack("<IIB", "header")
    at = r.pos
    payload = np.frombuffer(r.take(h * w, "payload"), dtype=np.uint8)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes at offset {r.pos}")
    bad = np.flatnonzero(payload >= num_classes)
    if bad.size:
        raise FormatError(
            f"{path}: class id {payload[bad[0]]} >= num_classes {num_classes} at offset {at + bad[0]}")
    return payload.reshape(h, w).astype(np.int64), int(num_classes)


def write_model(path: PathType, params: Dict[str, Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", VERSION, len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + encode_tensor(t))


def read_model(path: PathType) -> Dict[str, Tensor]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    r.magic(MODEL_MAGIC)
    r.version()
    (count,) = r.unpack("<I", "record count")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        params[name] = _decode_tensor(r)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes at offset {r.pos}")
    return params
