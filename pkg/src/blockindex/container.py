"""Versioned binary container for indexes and model checkpoints.

Layout (little-endian)::

    magic "BIDX"   version:u32   section_count:u32
    repeated:  name_len:u16  name:utf-8  payload_len:u64
               checksum:u64 (blake2b-8 of payload)  payload

Sections are written in the order given, so identical inputs produce
identical files.  Readers validate the magic before touching any section
data, verify every checksum, and report truncation explicitly.
"""

import hashlib
import io
import struct

import numpy as np

MAGIC = b"BIDX"
VERSION = 1

_HEAD = struct.Struct("<II")
_NAME_LEN = struct.Struct("<H")
_PAYLOAD = struct.Struct("<QQ")


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def write_container(path, sections):
    """sections: iterable of (name, payload bytes), order-preserving."""
    sections = list(sections)
    parts = [MAGIC, _HEAD.pack(VERSION, len(sections))]
    for name, payload in sections:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"section name too long: {name!r}")
        parts.append(_NAME_LEN.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_PAYLOAD.pack(len(payload), _checksum(payload)))
        parts.append(payload)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_container(path) -> dict:
    """Returns {section name: payload bytes}, insertion-ordered."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an index container")
    if len(raw) < 4 + _HEAD.size:
        raise ValueError(f"{path}: truncated container header")
    version, count = _HEAD.unpack_from(raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    sections = {}
    offset = 4 + _HEAD.size
    for _ in range(count):
        if offset + _NAME_LEN.size > len(raw):
            raise ValueError(f"{path}: truncated section header")
        (name_len,) = _NAME_LEN.unpack_from(raw, offset)
        offset += _NAME_LEN.size
        if offset + name_len + _PAYLOAD.size > len(raw):
            raise ValueError(f"{path}: truncated section header")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        payload_len, checksum = _PAYLOAD.unpack_from(raw, offset)
        offset += _PAYLOAD.size
        if offset + payload_len > len(raw):
            raise ValueError(f"{path}: truncated payload in section {name!r}")
        payload = raw[offset : offset + payload_len]
        offset += payload_len
        if _checksum(payload) != checksum:
            raise ValueError(f"{path}: checksum mismatch in section {name!r}")
        sections[name] = payload
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after sections")
    return sections


def array_to_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def array_from_bytes(payload: bytes) -> np.ndarray:
    return np.load(io.BytesIO(payload), allow_pickle=False)


def text_to_bytes(pairs: dict) -> bytes:
    """Canonical key=value text: sorted keys, one per line."""
    lines = [f"{k}={pairs[k]}" for k in sorted(pairs)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def text_from_bytes(payload: bytes) -> dict:
    out = {}
    for line in payload.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out
