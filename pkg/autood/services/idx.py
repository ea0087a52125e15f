"""IDX (MNIST-format) unsigned-byte files.

Header: two zero bytes, type code 0x08 (u8), number of dimensions, then one
big-endian u32 per dimension, then the payload in C order. Only vectors
(magic 0x00000801) and 3-D arrays (0x00000803) are accepted.
"""
import struct
from pathlib import Path
from typing import Union

import numpy as np

from autood.errors import ContractError, FormatError

MAGIC_VECTOR = 0x00000801
MAGIC_CUBE = 0x00000803
_MAGICS = {MAGIC_VECTOR: 1, MAGIC_CUBE: 3}


def load_idx(path: Union[str, Path], scale: bool = True) -> np.ndarray:
    """Parse an IDX file; bytes are scaled to [0, 1] unless ``scale`` is False."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError("truncated magic number", offset=len(blob))
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic not in _MAGICS:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{MAGIC_VECTOR:08x} or 0x{MAGIC_CUBE:08x}", offset=0)
    rank = _MAGICS[magic]
    header = 4 + 4 * rank
    if len(blob) < header:
        raise FormatError("truncated dimension sizes", offset=len(blob))
    shape = struct.unpack_from(f">{rank}I", blob, 4)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) < header + count:
        raise FormatError(f"truncated payload, expected {count} bytes", offset=len(blob))
    if len(blob) > header + count:
        raise FormatError("trailing bytes after payload", offset=header + count)
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(shape)
    return data / 255.0 if scale else data.copy()


def to_bytes(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        return array
    if array.size and (array.min() < 0 or array.max() > 1):
        raise ContractError("IDX export expects values in [0, 1] or uint8 input")
    return np.rint(array * 255.0).astype(np.uint8)


def save_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    array = to_bytes(array)
    magic = {1: MAGIC_VECTOR, 3: MAGIC_CUBE}.get(array.ndim)
    if magic is None:
        raise ContractError(f"IDX export supports 1-D or 3-D arrays, got {array.ndim}-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(struct.pack(">I", magic))
        handle.write(struct.pack(f">{array.ndim}I", *array.shape))
        handle.write(np.ascontiguousarray(array).tobytes())
    return path
