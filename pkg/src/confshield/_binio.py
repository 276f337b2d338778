"""Little-endian binary helpers and atomic file writes shared by the formats."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

from .errors import FormatError


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def string(self, text: str) -> None:
        data = text.encode("utf-8")
        self.pack("H", len(data))
        self.raw(data)

    def labels(self, names) -> None:
        self.pack("H", len(names))
        for name in names:
            self.string(name)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, what: str = "file") -> None:
        self._data = memoryview(data)
        self._pos = 0
        self._what = what

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise FormatError(f"truncated {self._what}")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def string(self) -> str:
        n = self.unpack("H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {self._what}") from exc

    def labels(self) -> list[str]:
        return [self.string() for _ in range(self.unpack("H"))]

    def expect_header(self, magic: bytes, version: int) -> None:
        got = self.take(len(magic)) if self.remaining >= len(magic) else b""
        if got != magic:
            raise FormatError(f"{self._what}: bad magic {got!r}, expected {magic!r}")
        v = self.unpack("H")
        if v != version:
            raise FormatError(f"{self._what}: unsupported version {v}")


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))
