"""Binary tensor encoding used by every XferLab artifact.

A tensor is stored as its rank (u32 little-endian), each dimension (u32),
then the payload as IEEE-754 binary64 little-endian in row-major order.
Files start with a four-byte magic identifying their kind.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from app.modules.errors import WeightFormatError

PathLike = Union[str, Path]

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = _U32.pack(arr.ndim) + b"".join(_U32.pack(int(d)) for d in arr.shape)
    return header + arr.tobytes(order="C")


def encode_u32(value: int) -> bytes:
    return _U32.pack(int(value))


def encode_u64(value: int) -> bytes:
    return _U64.pack(int(value))


def encode_f64(value: float) -> bytes:
    return _F64.pack(float(value))


class TensorReader:
    """Sequential reader over an in-memory buffer that reports byte offsets on failure."""

    def __init__(self, buffer: bytes, source: str = "<buffer>"):
        self.buffer = buffer
        self.source = source
        self.position = 0

    def _take(self, n: int, what: str) -> bytes:
        end = self.position + n
        if end > len(self.buffer):
            raise WeightFormatError(
                f"{self.source}: truncated while reading {what}", position=self.position
            )
        chunk = self.buffer[self.position:end]
        self.position = end
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        found = self._take(len(magic), "magic")
        if found != magic:
            raise WeightFormatError(
                f"{self.source}: bad magic {found!r}, expected {magic!r}", position=0
            )

    def read_u32(self, what: str = "u32") -> int:
        return _U32.unpack(self._take(4, what))[0]

    def read_u64(self, what: str = "u64") -> int:
        return _U64.unpack(self._take(8, what))[0]

    def read_f64(self, what: str = "f64") -> float:
        return _F64.unpack(self._take(8, what))[0]

    def read_bytes(self, n: int, what: str = "bytes") -> bytes:
        return self._take(n, what)

    def read_tensor(self) -> np.ndarray:
        start = self.position
        rank = self.read_u32("tensor rank")
        if rank > 8:
            raise WeightFormatError(f"{self.source}: implausible tensor rank {rank}", position=start)
        shape = tuple(self.read_u32("tensor dimension") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = self._take(8 * count, f"tensor payload of shape {shape}")
        return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    def at_end(self) -> bool:
        return self.position == len(self.buffer)

    def expect_end(self) -> None:
        if not self.at_end():
            raise WeightFormatError(
                f"{self.source}: {len(self.buffer) - self.position} trailing bytes",
                position=self.position,
            )


def write_tensor_file(path: PathLike, magic: bytes, tensors: Sequence[np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic)
        for t in tensors:
            fh.write(encode_tensor(t))


def read_tensor_file(path: PathLike, magic: bytes) -> List[np.ndarray]:
    reader = TensorReader(Path(path).read_bytes(), source=str(path))
    reader.expect_magic(magic)
    tensors = []
    while not reader.at_end():
        tensors.append(reader.read_tensor())
    return tensors
