"""Feature-set container and its binary file format.

Feature files are little-endian binary.  Unlabeled files carry the magic
``CIPF``; labeled files carry ``CIPL``.  Layout::

    magic[4]  version:u32  count:u32  dim:u32
    (CIPL only) class_count:u32
    vectors: count*dim float32, row-major
    (CIPL only) labels: count u32

Round-trips are bit-exact.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC_PLAIN = b"CIPF"
MAGIC_LABELED = b"CIPL"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<III")


@dataclass
class FeatureSet:
    """A batch of d-dimensional features with optional class labels."""

    vectors: np.ndarray  # (count, dim) float32
    labels: np.ndarray | None = None  # (count,) uint32, in [0, class_count)
    class_count: int | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if v.ndim != 2:
            raise ValueError(f"vectors must be 2-D (count, dim), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("vectors contain non-finite entries")
        self.vectors = v
        if self.labels is not None:
            if self.class_count is None:
                raise ValueError("labeled feature sets need class_count")
            lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.uint32))
            if lab.shape != (v.shape[0],):
                raise ValueError("labels length must match vector count")
            if lab.size and int(lab.max()) >= self.class_count:
                raise ValueError("label out of range [0, class_count)")
            self.labels = lab

    @property
    def count(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.count


def write_features(path, fs: FeatureSet):
    labeled = fs.labels is not None
    parts = [
        MAGIC_LABELED if labeled else MAGIC_PLAIN,
        _HEADER.pack(FORMAT_VERSION, fs.count, fs.dim),
    ]
    if labeled:
        parts.append(struct.pack("<I", fs.class_count))
    parts.append(fs.vectors.astype("<f4", copy=False).tobytes())
    if labeled:
        parts.append(fs.labels.astype("<u4", copy=False).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    magic = raw[:4]
    if magic not in (MAGIC_PLAIN, MAGIC_LABELED):
        raise ValueError(f"{path}: bad magic {magic!r}")
    labeled = magic == MAGIC_LABELED
    header_end = 4 + _HEADER.size + (4 if labeled else 0)
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated header")
    version, count, dim = _HEADER.unpack_from(raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    class_count = None
    offset = 4 + _HEADER.size
    if labeled:
        (class_count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
    expected = offset + 4 * count * dim + (4 * count if labeled else 0)
    if len(raw) != expected:
        raise ValueError(
            f"{path}: file is {len(raw)} bytes but {count}x{dim} "
            f"features require exactly {expected}"
        )
    vectors = (
        np.frombuffer(raw, dtype="<f4", count=count * dim, offset=offset)
        .reshape(count, dim)
        .copy()
    )
    labels = None
    if labeled:
        labels = (
            np.frombuffer(raw, dtype="<u4", count=count, offset=offset + 4 * count * dim)
            .copy()
        )
    return FeatureSet(vectors=vectors, labels=labels, class_count=class_count)
