"""Binary tensor container shared by model (`ASVM`) and codec (`RVQC`) files.

Layout, all little-endian::

    magic        4 bytes
    version      u32
    count        u32
    count times:
        name_len u32, name (utf-8), rank u32, dims u32 * rank,
        payload  float32 * prod(dims), row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import ContainerFormatError

FORMAT_VERSION = 1


def as_stored(array: np.ndarray) -> np.ndarray:
    """Round to float32 precision so an in-memory value survives a save/load cycle."""
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def write_container(path: Path | str, magic: bytes, tensors: Mapping[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError(f"magic must be 4 bytes, got {magic!r}")
    chunks = [magic, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, tensor in tensors.items():
        array = np.ascontiguousarray(tensor, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ContainerFormatError(f"{self.source}: truncated file at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_container(path: Path | str, magic: bytes) -> Dict[str, np.ndarray]:
    """Read every tensor as float64; raises ContainerFormatError on any mismatch."""
    reader = _Reader(Path(path).read_bytes(), str(path))
    found = reader.take(4)
    if found != magic:
        raise ContainerFormatError(f"{path}: expected magic {magic.decode('ascii')!r}, found {found!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError(f"{path}: tensor name is not valid utf-8") from exc
        dims = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(reader.take(4 * count), dtype="<f4")
        tensors[name] = payload.reshape(dims).astype(np.float64)
    if reader.offset != len(reader.data):
        raise ContainerFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return tensors


def require(tensors: Mapping[str, np.ndarray], name: str, shape: tuple, source: str) -> np.ndarray:
    if name not in tensors:
        raise ContainerFormatError(f"{source}: missing tensor {name!r}")
    tensor = tensors[name]
    if tensor.shape != tuple(shape):
        raise ContainerFormatError(f"{source}: tensor {name!r} has shape {tensor.shape}, expected {tuple(shape)}")
    return tensor
