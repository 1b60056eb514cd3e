"""Binary array blobs and named-parameter checkpoints.

Blob layout (little-endian throughout):
    magic   4 bytes  b"PBLB"
    version u32      currently 1
    dtype   u32      1 = float32, 2 = float64
    ndim    u32
    shape   u32 * ndim
    payload raw array data, C order

Checkpoint layout:
    magic   4 bytes  b"PCKP"
    version u32      currently 1
    meta    u32 length + UTF-8 JSON (variant, config, bookkeeping)
    count   u32
    then per parameter: u32 name length, UTF-8 name, and a full blob record
    (float64) as above.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

BLOB_MAGIC = b"PBLB"
CKPT_MAGIC = b"PCKP"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _pack_array(arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported blob dtype {arr.dtype}")
    header = BLOB_MAGIC + struct.pack("<III", 1, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def write_blob(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_pack_array(arr))


def _unpack_array(buf: bytes, offset: int = 0, origin: str = "blob") -> tuple[np.ndarray, int]:
    if len(buf) < offset + 16:
        raise CorruptionError(f"{origin}: truncated header")
    if buf[offset:offset + 4] != BLOB_MAGIC:
        raise FormatError(f"{origin}: bad magic {buf[offset:offset + 4]!r}")
    version, code, ndim = struct.unpack_from("<III", buf, offset + 4)
    if version != 1:
        raise FormatError(f"{origin}: unsupported blob version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{origin}: unknown dtype code {code}")
    pos = offset + 16
    if len(buf) < pos + 4 * ndim:
        raise CorruptionError(f"{origin}: truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise CorruptionError(f"{origin}: payload truncated ({len(buf) - pos} of {nbytes} bytes)")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(shape)
    return arr.copy(), pos + nbytes


def read_blob(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = _unpack_array(buf, 0, str(path))
    if end != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def write_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> None:
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<I", 1)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        name_bytes = name.encode("utf-8")
        out += struct.pack("<I", len(name_bytes))
        out += name_bytes
        out += _pack_array(np.asarray(params[name], dtype=np.float64))
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata ({exc})") from exc
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        arr, pos = _unpack_array(buf, pos, f"{path}:{name}")
        params[name] = arr
    if pos != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - pos} trailing bytes")
    return params, meta
