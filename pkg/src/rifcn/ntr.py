"""NTR: a minimal little-endian raw tensor container.

Single tensor::

    b"NTR1" b"<dtype> <ndim> <d0> ... <dN-1>\\n" <row-major payload>

Named collection (checkpoints)::

    b"NTR1" <u32 count> { <u16 len> <name> <header line> <payload> } * count <u32 crc32>

The CRC covers every byte between the magic and the CRC itself.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NTR1"
DTYPES = {"u8": np.dtype("u1"), "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {v: k for k, v in DTYPES.items()}
MAX_ELEMENTS = 1 << 34
MAX_HEADER = 256


class NTRError(ValueError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    try:
        return _NAMES[np.dtype(dt)]
    except KeyError:
        raise NTRError(f"unsupported dtype {arr.dtype}") from None


def _encode_tensor(arr: np.ndarray) -> bytes:
    name = _dtype_name(arr)
    dims = " ".join(str(d) for d in arr.shape)
    header = f"{name} {arr.ndim} {dims}".rstrip() + "\n"
    payload = np.ascontiguousarray(arr, dtype=DTYPES[name]).tobytes()
    return header.encode("ascii") + payload


def _decode_tensor(buf: io.BytesIO) -> np.ndarray:
    line = buf.readline(MAX_HEADER)
    if not line.endswith(b"\n"):
        raise NTRError("truncated or oversized tensor header")
    try:
        fields = line.decode("ascii").split()
        dtype = DTYPES[fields[0]]
        ndim = int(fields[1])
        shape = tuple(int(f) for f in fields[2:])
    except (UnicodeDecodeError, KeyError, IndexError, ValueError):
        raise NTRError(f"malformed tensor header {line!r}") from None
    if len(shape) != ndim or any(d < 0 for d in shape):
        raise NTRError(f"header dims {shape} inconsistent with ndim {ndim}")
    count = 1
    for d in shape:
        count *= d
        if count > MAX_ELEMENTS:
            raise NTRError("dimension overflow")
    nbytes = count * dtype.itemsize
    data = buf.read(nbytes)
    if len(data) != nbytes:
        raise NTRError(f"truncated payload: expected {nbytes} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def encode(arr: np.ndarray) -> bytes:
    return MAGIC + _encode_tensor(arr)


def decode(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise NTRError("bad magic")
    buf = io.BytesIO(data[4:])
    arr = _decode_tensor(buf)
    if buf.read(1):
        raise NTRError("trailing bytes after tensor payload")
    return arr


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    body = bytearray(struct.pack("<I", len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw + _encode_tensor(arr)
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_records(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise NTRError("bad magic")
    if len(data) < 12:
        raise NTRError("truncated file")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise NTRError("checksum failure")
    buf = io.BytesIO(body)
    (count,) = struct.unpack("<I", buf.read(4))
    records = {}
    for _ in range(count):
        head = buf.read(2)
        if len(head) != 2:
            raise NTRError("truncated file")
        (n,) = struct.unpack("<H", head)
        name = buf.read(n)
        if len(name) != n:
            raise NTRError("truncated file")
        records[name.decode("utf-8")] = _decode_tensor(buf)
    if buf.read(1):
        raise NTRError("trailing bytes after records")
    return records


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
