"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"NVC1"                      magic
    u32 version                  FORMAT_VERSION
    u32 meta_len, meta bytes     UTF-8 JSON object (sorted keys)
    u32 n_tensors
    per tensor:
        u32 name_len, name bytes (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 values (C order)
    u32 crc32                    over every byte before it, magic included
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

from ..errors import BadMagic, ChecksumFail, MalformedInput, VersionMismatch

MAGIC = b"NVC1"
FORMAT_VERSION = 1


def save_checkpoint(params: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(meta))
    out += meta
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        key = name.encode("utf-8")
        out += struct.pack("<I", len(key)) + key
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def load_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (named arrays, metadata)."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic("not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise ChecksumFail("checkpoint truncated")
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumFail("checkpoint checksum mismatch (corrupt or truncated)")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        (meta_len,) = struct.unpack_from("<I", blob, pos + 4)
        pos += 8
        metadata = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise MalformedInput(f"checkpoint body is malformed: {exc}") from None
    if pos != len(blob) - 4:
        raise MalformedInput("trailing bytes in checkpoint body")
    return params, metadata


def write_checkpoint(path, params, metadata=None) -> bytes:
    blob = save_checkpoint(params, metadata)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Reads a checkpoint file; a missing or empty file is reported as BadMagic."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise BadMagic(f"checkpoint {path} does not exist") from None
    return load_checkpoint(blob)


def checksum(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()
