"""Little-endian binary helpers shared by the feature, table and checkpoint formats."""

import struct

from geoloc.errors import FormatError


class ByteReader:
    """Cursor over a byte string that fails with the offending offset."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.offset

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise FormatError(f"truncated: needed {size} bytes, {self.remaining} left", self.offset)
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        """A u32-length-prefixed UTF-8 string."""
        start = self.offset
        (length,) = self.unpack("<I")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("string is not UTF-8", start) from None


def pack_text(text: str) -> bytes:
    encoded = text.encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded
