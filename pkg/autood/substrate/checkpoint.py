"""Flat binary tensor container.

Layout: magic ``AODT``, u32 version, then repeated records of
``u32 name length, name bytes (utf-8), u32 rank, u32 dims..., float64 values``
until end of file. All integers and floats are little-endian.
"""
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from autood.errors import FormatError

MAGIC = b"AODT"
VERSION = 1

_U32 = struct.Struct("<I")


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(_U32.pack(VERSION))
        for name, value in tensors.items():
            array = np.asarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            handle.write(_U32.pack(len(encoded)))
            handle.write(encoded)
            handle.write(_U32.pack(array.ndim))
            for dim in array.shape:
                handle.write(_U32.pack(dim))
            handle.write(np.ascontiguousarray(array).tobytes())
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError("bad magic, expected 'AODT'", offset=0)
    offset = 4

    def read_u32(what: str) -> int:
        nonlocal offset
        if offset + 4 > len(blob):
            raise FormatError(f"truncated {what}", offset=offset)
        (value,) = _U32.unpack_from(blob, offset)
        offset += 4
        return value

    version = read_u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)

    tensors: Dict[str, np.ndarray] = {}
    while offset < len(blob):
        length = read_u32("name length")
        if offset + length > len(blob):
            raise FormatError("truncated name", offset=offset)
        try:
            name = blob[offset:offset + length].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid utf-8", offset=offset + exc.start) from exc
        offset += length
        rank = read_u32("rank")
        shape = tuple(read_u32("dimension") for _ in range(rank))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated values of '{name}'", offset=offset)
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    return tensors
