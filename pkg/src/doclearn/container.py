"""Versioned little-endian binary container shared by checkpoints, template
sets and raw datasets.

Layout::

    magic        8 bytes   file kind, e.g. b"DOCCKPT\\0"
    version      uint32    FORMAT_VERSION
    header_len   uint32    byte length of the JSON header
    header       utf-8     JSON object, keys sorted; ``header["arrays"]`` is a
                           list of {"name", "dtype", "shape"} in payload order
    payload      raw array blocks, C order, "<f8" or "<i8"
    checksum     uint32    CRC-32 of every preceding byte

Encoding is canonical (sorted keys, compact separators), so writing the
same content twice gives byte-identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class CorruptFileError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


def encode(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    table = []
    blocks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        table.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blocks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    full = dict(header, arrays=table)
    text = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<II", FORMAT_VERSION, len(text)) + text + b"".join(blocks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 20:
        raise CorruptFileError("file is truncated")
    if blob[:8] != magic:
        raise CorruptFileError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptFileError("checksum mismatch (truncated or corrupted file)")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}") from None
    arrays = {}
    offset = 16 + hlen
    end = len(blob) - 4
    for entry in header.pop("arrays"):
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > end:
            raise CorruptFileError(f"array {entry['name']!r} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != end:
        raise CorruptFileError("trailing bytes after payload")
    return header, arrays


def write(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, header, arrays))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
