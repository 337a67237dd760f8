"""Single-file binary container shared by the corpus, label-bundle, and
checkpoint formats.

Layout: 4-byte magic | 1 version byte | u64 manifest length | JSON manifest
(utf-8, sorted keys) | u32 entry count | entries (u16 name length, name,
u64 offset, u64 length) | payload blocks. All integers little-endian;
offsets are absolute file positions. Writes go through a temp file plus
rename so a reader never sees a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile


class ContainerError(IOError):
    pass


def write_container(path, magic: bytes, version: int, manifest: dict,
                    blocks: dict[str, bytes]):
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    names = list(blocks)  # preserve caller order: it is part of the format
    header_len = 4 + 1 + 8 + len(mbytes) + 4
    table_len = sum(2 + len(n.encode()) + 16 for n in names)
    offset = header_len + table_len
    entries = []
    for n in names:
        b = blocks[n]
        entries.append((n.encode(), offset, len(b)))
        offset += len(b)

    out = bytearray()
    out += magic
    out += struct.pack("<B", version)
    out += struct.pack("<Q", len(mbytes))
    out += mbytes
    out += struct.pack("<I", len(names))
    for name, off, length in entries:
        out += struct.pack("<H", len(name)) + name + struct.pack("<QQ", off, length)
    for n in names:
        out += blocks[n]

    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(out)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, magic: bytes, version: int):
    """Returns (manifest dict, ordered {name: bytes})."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if raw[:4] != magic:
            raise ContainerError(
                f"bad magic: expected {magic!r}, found {bytes(raw[:4])!r}"
            )
        (got_version,) = struct.unpack_from("<B", raw, 4)
        if got_version != version:
            raise ContainerError(
                f"unsupported version: expected {version}, found {got_version}"
            )
        (mlen,) = struct.unpack_from("<Q", raw, 5)
        manifest = json.loads(raw[13:13 + mlen].decode())
        pos = 13 + mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            off, length = struct.unpack_from("<QQ", raw, pos)
            pos += 16
            if off + length > len(raw):
                raise ContainerError(f"block {name!r} extends past end of file")
            blocks[name] = raw[off:off + length]
        return manifest, blocks
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, IndexError) as e:
        raise ContainerError(f"corrupt or truncated container: {e}") from e
