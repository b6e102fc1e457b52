"""Little-endian framing helpers shared by the dataset cache and model files.

Every file is ``magic | u32 version | body | sha256(magic..body)``.
"""

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

from filelock import FileLock

from .errors import ChecksumError, FormatError, VersionError

DIGEST_SIZE = 32


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, data: bytes):
        self._parts.append(data)

    def pack(self, fmt: str, *values):
        self._parts.append(struct.pack("<" + fmt, *values))

    def text(self, s: str):
        data = s.encode("utf-8")
        self.pack("I", len(data))
        self.raw(data)

    def json(self, obj):
        self.text(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, path=None):
        self._data = data
        self._pos = 0
        self._path = path

    def raw(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FormatError(f"{self._path}: unexpected end of data")
        out = self._data[self._pos:self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("I")
        return self.raw(n).decode("utf-8")

    def json(self):
        return json.loads(self.text())

    def at_end(self) -> bool:
        return self._pos == len(self._data)


def frame(magic: bytes, version: int, body: bytes) -> bytes:
    head = magic + struct.pack("<I", version)
    return head + body + hashlib.sha256(head + body).digest()


def unframe(data: bytes, magic: bytes, supported_version: int, path=None) -> bytes:
    """Validate magic, version and checksum; return the body bytes.

    Version is checked before the checksum so that a file written by a
    newer release fails with :class:`VersionError` rather than looking corrupt.
    """
    head_len = len(magic) + 4
    if len(data) < head_len + DIGEST_SIZE:
        raise ChecksumError(f"{path}: file too short ({len(data)} bytes), truncated or empty")
    if data[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {data[:len(magic)]!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", data[len(magic):head_len])
    if version != supported_version:
        raise VersionError(f"{path}: format version {version} is not supported "
                           f"(this build reads version {supported_version})")
    payload, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt or truncated")
    return payload[head_len:]


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` via temp file + rename under an exclusive lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            os.chmod(tmp, 0o666 & ~_umask())
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
