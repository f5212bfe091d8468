"""Binary containers: ``AVTF`` single-tensor files and ``AVBF`` parameter checkpoints.

AVTF layout (little-endian): magic ``AVTF``, u16 version, u8 dtype code, u8 rank,
rank x u64 extents, raw payload.

AVBF layout: magic ``AVBF``, u16 version, u32 config length, UTF-8 JSON config,
u32 tensor count, then per tensor: u16 name length, name, u8 dtype code, u8 rank,
rank x u64 extents, raw payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"AVTF"
CHECKPOINT_MAGIC = b"AVBF"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
CODES = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return CODES[dt]


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _code(arr)
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def _unpack_array(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    code, rank = struct.unpack_from("<BB", buf, off)
    off += 2
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if off + nbytes > len(buf):
        raise FormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
    return arr, off + nbytes


def encode_tensor(arr) -> bytes:
    return TENSOR_MAGIC + struct.pack("<H", VERSION) + _pack_array(np.asarray(arr))


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError("bad magic, not an AVTF tensor file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported AVTF version {version}")
    arr, off = _unpack_array(buf, 6)
    if off != len(buf):
        raise FormatError("payload length does not match extents")
    return arr


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + _pack_array(np.asarray(tensors[name])))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not an AVBF checkpoint")
    version, clen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported AVBF version {version}")
    off = 10
    config = json.loads(buf[off:off + clen].decode())
    off += clen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        tensors[name], off = _unpack_array(buf, off)
    return tensors, config


def save_checkpoint(path, tensors, config) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, config))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
