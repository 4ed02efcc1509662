"""Little-endian binary containers with a 4-byte magic ``XXXn`` where ``n`` is
the format version digit."""
import struct

import numpy as np


class FormatError(ValueError):
    """Malformed, truncated or foreign file."""


class FormatVersionError(FormatError):
    """File written by a newer format version than this reader supports."""


def check_magic(buf, family, version=1):
    if len(buf) < 4:
        raise FormatError(f"truncated {family} file: missing magic")
    magic = bytes(buf[:4])
    if magic[:3] != family.encode("ascii"):
        raise FormatError(f"bad magic {magic!r}, expected {family}{version}")
    try:
        found = int(magic[3:4].decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"bad magic {magic!r}") from None
    if found != version:
        raise FormatVersionError(f"{family} format version {found} not supported (reader is version {version})")


class Reader:
    def __init__(self, buf, what):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def _take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} file at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        vals = struct.unpack("<" + fmt, self._take(size))
        return vals[0] if len(vals) == 1 else vals

    def array(self, dtype, shape):
        dtype = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape)) if len(shape) else 1
        raw = self._take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what} file")


def pack_array(arr, dtype):
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def write_bytes(path, data):
    with open(path, "wb") as f:
        f.write(data)


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()
