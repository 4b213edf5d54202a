"""Length-prefixed binary section containers.

Scene files (.pan), checkpoints, and prediction files all share the same
trivial layout: a concatenation of sections, each preceded by an 8-byte
little-endian unsigned length. Readers get either the full section list or
a truncation error; no partial data is ever returned.
"""

from __future__ import annotations

import struct

from .errors import FormatError

_LEN = struct.Struct("<Q")

# Refuse absurd section lengths so a corrupt prefix fails fast instead of
# attempting a huge allocation.
_MAX_SECTION = 1 << 40


def write_sections(path: str, sections: list[bytes]) -> None:
    with open(path, "wb") as f:
        for blob in sections:
            f.write(_LEN.pack(len(blob)))
            f.write(blob)


def read_sections(path: str, expect: int | None = None) -> list[bytes]:
    """Read all sections from ``path``.

    Raises FormatError on truncation or, when ``expect`` is given, on a
    section-count mismatch.
    """
    sections: list[bytes] = []
    with open(path, "rb") as f:
        while True:
            header = f.read(_LEN.size)
            if not header:
                break
            if len(header) < _LEN.size:
                raise FormatError(f"{path}: truncated section length prefix")
            (length,) = _LEN.unpack(header)
            if length > _MAX_SECTION:
                raise FormatError(f"{path}: implausible section length {length}")
            blob = f.read(length)
            if len(blob) < length:
                raise FormatError(
                    f"{path}: truncated section (expected {length} bytes, got {len(blob)})"
                )
            sections.append(blob)
    if expect is not None and len(sections) != expect:
        raise FormatError(
            f"{path}: expected {expect} sections, found {len(sections)}"
        )
    return sections
