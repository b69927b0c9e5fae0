"""Self-describing binary container for named arrays (checkpoints and LPS caches).

Layout, all little-endian::

    magic     8 bytes  b"SNNSE\\x00CK"
    version   u32
    count     u32
    entries   count x { u16 name_len, name (utf-8), 2-byte dtype code,
                        u8 ndim, u64 dims[ndim], u64 offset, u64 nbytes }
    payload   raw array bytes; offsets are relative to the payload start
    crc32     u32 over every preceding byte
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SNNSE\x00CK"
VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "u1"}


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


def _code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype == np.dtype(dt):
            return code
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode(entries: dict, version: int = VERSION) -> bytes:
    arrays = {}
    for name, value in entries.items():
        arr = np.asarray(value)
        if arr.dtype == np.float32:
            arr = arr.astype("<f4")
        elif arr.dtype == np.float64:
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        elif arr.dtype == np.bool_:
            arr = arr.astype("u1")
        arrays[name] = np.ascontiguousarray(arr)
    head = [MAGIC, struct.pack("<II", version, len(arrays))]
    offset = 0
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw_name)) + raw_name + _code(arr).encode("ascii"))
        head.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        head.append(struct.pack("<QQ", offset, arr.nbytes))
        offset += arr.nbytes
    body = b"".join(head) + b"".join(a.tobytes() for a in arrays.values())
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> dict:
    if len(blob) < len(MAGIC) + 12:
        raise ContainerError(f"truncated container ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")
    if body[: len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic bytes: not a snnse container")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version} (expected {VERSION})")
    directory = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            code = body[pos : pos + 2].decode("ascii")
            pos += 2
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", body, pos)
            pos += 16
            directory.append((name, code, shape, offset, nbytes))
    except struct.error as exc:
        raise ContainerError(f"truncated directory: {exc}") from exc
    out = {}
    for name, code, shape, offset, nbytes in directory:
        if code not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code!r}")
        a, z = pos + offset, pos + offset + nbytes
        if z > len(body):
            raise ContainerError(f"entry {name!r}: payload truncated")
        arr = np.frombuffer(body[a:z], dtype=_DTYPES[code])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"entry {name!r}: size does not match shape {shape}")
        out[name] = arr.reshape(shape).copy()
    return out


def write_container(path, entries: dict, version: int = VERSION) -> None:
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(entries, version)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> dict:
    return decode(Path(path).read_bytes())


def text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def entry_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8")
