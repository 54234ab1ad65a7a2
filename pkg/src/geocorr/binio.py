"""Little-endian binary headers shared by the on-disk formats."""

import os
import struct
import tempfile
from pathlib import Path

VERSION = 1


class FormatError(ValueError):
    pass


def pack_header(magic: bytes, *fields: int) -> bytes:
    assert len(magic) == 4
    return magic + struct.pack(f"<{1 + len(fields)}I", VERSION, *fields)


def unpack_header(buf: bytes, magic: bytes, n_fields: int):
    size = 4 + 4 * (1 + n_fields)
    if len(buf) < size or buf[:4] != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    vals = struct.unpack(f"<{1 + n_fields}I", buf[4:size])
    if vals[0] != VERSION:
        raise FormatError(f"unsupported version {vals[0]}")
    return vals[1:], size


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
