"""
Spatial Forcing Lab - Binary Record I/O

Little-endian record reader/writer shared by the dataset and checkpoint formats.
"""
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import structlog

from src.exceptions import BadMagicError, StorageError, UnexpectedEOFError, VersionMismatchError


logger = structlog.get_logger(__name__)


class BinaryWriter:
    """Accumulates little-endian fields in memory, then writes them in one go."""

    def __init__(self):
        self._buffer = bytearray()

    def __len__(self) -> int:
        return len(self._buffer)

    def raw(self, data: bytes) -> None:
        self._buffer.extend(data)

    def u8(self, value: int) -> None:
        self._buffer.extend(struct.pack("<B", value))

    def u16(self, value: int) -> None:
        self._buffer.extend(struct.pack("<H", value))

    def u32(self, value: int) -> None:
        self._buffer.extend(struct.pack("<I", value))

    def f32_array(self, array: np.ndarray) -> None:
        self._buffer.extend(np.ascontiguousarray(array, dtype="<f4").tobytes())

    def f64_array(self, array: np.ndarray) -> None:
        self._buffer.extend(np.ascontiguousarray(array, dtype="<f8").tobytes())

    def bits(self, mask: np.ndarray) -> None:
        """Pack a boolean array row-major, MSB first, padded to a whole byte."""
        self._buffer.extend(np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes())

    def getvalue(self) -> bytes:
        return bytes(self._buffer)

    def save(self, path: str | Path) -> None:
        """Write the buffer to ``path``, creating parent directories."""
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(self._buffer)
        except OSError as e:
            raise StorageError(f"cannot write file ({e.strerror})", path=str(path)) from e
        logger.debug("Binary file written", path=str(path), bytes=len(self._buffer))


class BinaryReader:
    """Cursor over an in-memory byte string; short reads raise UnexpectedEOFError."""

    def __init__(self, data: bytes, path: Optional[str] = None):
        self._data = data
        self._offset = 0
        self.path = path

    @classmethod
    def open(cls, path: str | Path) -> "BinaryReader":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise StorageError(f"cannot read file ({e.strerror})", path=str(path)) from e
        return cls(data, path=str(path))

    @property
    def remaining(self) -> int:
        return len(self._data) - self._offset

    def read(self, n: int) -> bytes:
        if n > self.remaining:
            raise UnexpectedEOFError(
                f"unexpected end of file at byte {len(self._data)} "
                f"(needed {n} more bytes at offset {self._offset})",
                path=self.path,
            )
        chunk = self._data[self._offset:self._offset + n]
        self._offset += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.read(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.read(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def f32_array(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.read(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)

    def f64_array(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.read(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def bits(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.read((count + 7) // 8)
        unpacked = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count)
        return unpacked.astype(bool).reshape(shape)

    def expect_magic(self, magic: bytes) -> None:
        found = self._data[:len(magic)]
        if found != magic:
            raise BadMagicError(f"bad magic: expected {magic!r}, found {found!r}", path=self.path)
        self._offset = len(magic)

    def expect_version(self, version: int) -> None:
        found = self.u8()
        if found != version:
            raise VersionMismatchError(
                f"version mismatch: expected {version}, found {found}", path=self.path
            )
