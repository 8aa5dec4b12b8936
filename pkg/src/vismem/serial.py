"""Little-endian binary IO helpers shared by the bank/index/parameter formats."""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError


def atomic_write_bytes(path, data: bytes) -> None:
    """Write a file atomically (temp file in the same directory + rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Writer:
    """Accumulates a little-endian byte stream."""

    def __init__(self):
        self._chunks: list[bytes] = []

    def magic(self, tag: str) -> "Writer":
        self._chunks.append(tag.encode("ascii"))
        return self

    def u32(self, value: int) -> "Writer":
        self._chunks.append(struct.pack("<I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._chunks.append(struct.pack("<Q", value))
        return self

    def f32(self, value: float) -> "Writer":
        self._chunks.append(struct.pack("<f", value))
        return self

    def f32_array(self, arr: np.ndarray) -> "Writer":
        self._chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return self

    def i64_array(self, arr: np.ndarray) -> "Writer":
        self._chunks.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        return self

    def u8_array(self, arr: np.ndarray) -> "Writer":
        self._chunks.append(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
        return self

    def raw(self, data: bytes) -> "Writer":
        self._chunks.append(data)
        return self

    def json_block(self, obj) -> "Writer":
        payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
        self.u32(len(payload))
        self._chunks.append(payload)
        return self

    def fixed_string(self, s: str, length: int) -> "Writer":
        encoded = s.encode("utf-8")
        if len(encoded) > length:
            raise FormatError(f"string {s!r} exceeds fixed field length {length}")
        self._chunks.append(encoded + b"\x00" * (length - len(encoded)))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class Reader:
    """Sequential reader that raises FormatError with the failing byte offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def _take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"truncated file: need {n} bytes, have {len(self.data) - self.offset}",
                offset=self.offset,
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def magic(self, expected: str) -> None:
        start = self.offset
        tag = self._take(len(expected))
        if tag != expected.encode("ascii"):
            raise FormatError(f"bad magic {tag!r}, expected {expected!r}", offset=start)

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def f32_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self._take(4 * count), dtype="<f4").astype(np.float32)
        return arr.reshape(shape) if shape is not None else arr

    def i64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<i8").astype(np.int64)

    def u8_array(self, count: int, shape=None) -> np.ndarray:
        arr = np.frombuffer(self._take(count), dtype=np.uint8).copy()
        return arr.reshape(shape) if shape is not None else arr

    def json_block(self):
        start = self.offset
        length = self.u32()
        try:
            return json.loads(self._take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad JSON block: {exc}", offset=start) from exc

    def fixed_string(self, length: int) -> str:
        start = self.offset
        raw = self._take(length)
        try:
            return raw.rstrip(b"\x00").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad UTF-8 in fixed string: {exc}", offset=start) from exc

    def expect_eof(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.offset} trailing bytes", offset=self.offset
            )


def read_file(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()
