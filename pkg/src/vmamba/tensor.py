"""Dense tensors and the VMTB checksummed bundle format.

Tensors are plain read-only, C-contiguous numpy arrays of float32 or float64.
A :class:`TensorBundle` is an ordered, name-unique collection of them that
serializes bit-exactly to the little-endian VMTB layout::

    b"VMTB" | u32 version=1 | u32 count
    per tensor: u16 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64)
                | u8 rank | rank x u64 dims | payload (row-major, LE)
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"VMTB"
VERSION = 1
MAX_NAME_BYTES = 0xFFFF

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class NonFiniteError(ValueError):
    pass


class VMTBError(ValueError):
    """Base class for malformed VMTB streams."""


class BadMagicError(VMTBError):
    pass


class UnsupportedVersionError(VMTBError):
    pass


class TruncatedError(VMTBError):
    pass


class ChecksumError(VMTBError):
    pass


class DuplicateNameError(VMTBError):
    pass


def resolve_dtype(dtype) -> np.dtype:
    """Accept ``"f32"``/``"f64"``, 32/64 or anything numpy understands."""
    if isinstance(dtype, str) and dtype in ("f32", "f64"):
        dtype = np.float32 if dtype == "f32" else np.float64
    elif dtype in (32, 64):
        dtype = np.float32 if dtype == 32 else np.float64
    dt = np.dtype(dtype)
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported tensor dtype {dt}; expected float32 or float64")
    return dt


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if x.size and not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def tensor_create(shape: Sequence[int], dtype, data, checked: bool = True) -> np.ndarray:
    """Build an immutable row-major tensor from a flat sequence of values.

    The values are copied. ``checked`` rejects NaN/Inf.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    dt = resolve_dtype(dtype)
    flat = np.array(data, dtype=dt).reshape(-1)
    expected = int(np.prod(shape, dtype=np.int64))
    if flat.size != expected:
        raise ValueError(f"length mismatch: shape {shape} needs {expected} values, got {flat.size}")
    out = flat.reshape(shape).copy(order="C")
    if checked:
        check_finite(out)
    out.setflags(write=False)
    return out


def as_tensor(x, dtype=None, checked: bool = True) -> np.ndarray:
    """Immutable contiguous copy of an existing array."""
    arr = np.asarray(x)
    dt = resolve_dtype(dtype if dtype is not None else arr.dtype)
    return tensor_create(arr.shape, dt, arr.reshape(-1), checked=checked)


def _validate_name(name: str) -> bytes:
    if not isinstance(name, str) or not name:
        raise ValueError("tensor names must be non-empty strings")
    raw = name.encode("utf-8")
    if len(raw) > MAX_NAME_BYTES:
        raise ValueError(f"tensor name longer than {MAX_NAME_BYTES} bytes: {name[:40]}...")
    return raw


class TensorBundle:
    """Ordered mapping of unique names to tensors."""

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] = ()):
        self._entries: dict[str, np.ndarray] = {}
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, tensor) -> None:
        _validate_name(name)
        if name in self._entries:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        arr = np.asarray(tensor)
        resolve_dtype(arr.dtype)
        if arr.flags.writeable or not arr.flags.c_contiguous:
            arr = as_tensor(arr, checked=False)
        self._entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorBundle):
            return NotImplemented
        if self.names() != other.names():
            return False
        for name, a in self.items():
            b = other[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.dtype}{list(v.shape)}" for k, v in self.items())
        return f"TensorBundle({inner})"


def vmtb_write(bundle: TensorBundle) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(bundle))]
    for name, t in bundle.items():
        raw = _validate_name(name)
        code = _DTYPE_CODES[np.dtype(t.dtype)]
        if t.ndim > 255:
            raise ValueError(f"rank {t.ndim} too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype=_CODE_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.end = end
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"stream truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def vmtb_read(data: bytes) -> TensorBundle:
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("stream shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedError("stream truncated in header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported VMTB version {version}")

    # walk the structure first so a short stream reports truncation, not a checksum error
    rd = _Reader(data, max(len(data) - 4, 0))
    rd.take(8)
    (count,) = rd.unpack("<I")
    raw_entries = []
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name_raw = rd.take(name_len)
        code, rank = rd.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise VMTBError(f"unknown dtype code {code}")
        dims = rd.unpack(f"<{rank}Q")
        n = 1
        for d in dims:
            n *= d
        payload = rd.take(n * _CODE_DTYPES[code].itemsize)
        raw_entries.append((name_raw, code, dims, payload))
    if len(data) < rd.pos + 4:
        raise TruncatedError("missing CRC32 trailer")
    if len(data) > rd.pos + 4:
        raise VMTBError(f"{len(data) - rd.pos - 4} trailing bytes after CRC32 trailer")

    (stored,) = struct.unpack_from("<I", data, rd.pos)
    actual = zlib.crc32(data[:rd.pos]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")

    bundle = TensorBundle()
    for name_raw, code, dims, payload in raw_entries:
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise VMTBError(f"tensor name is not valid utf-8: {name_raw!r}") from exc
        arr = np.frombuffer(payload, dtype=_CODE_DTYPES[code]).astype(
            _CODE_DTYPES[code].newbyteorder("="), copy=True).reshape(dims)
        arr.setflags(write=False)
        bundle.add(name, arr)
    return bundle


def save_bundle(bundle: TensorBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(vmtb_write(bundle))


def load_bundle(path) -> TensorBundle:
    with open(path, "rb") as fh:
        return vmtb_read(fh.read())
