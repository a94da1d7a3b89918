"""Binary archive of adversarial examples.

Layout (integers little-endian)::

    8 bytes   magic b"MMDGADV1"
    u32       format version (ARCHIVE_VERSION)
    u32       metadata length M
    M bytes   UTF-8 JSON metadata (estimator, config digest, ...)
    u32       record count R
    R times:  u32 example index, u32 label, u32 ndim, u32 dims[ndim],
              f64 clean pixels, f64 adversarial pixels (C order)

Clean pixels are stored next to each adversarial image so an archive can
be scored on a target without re-loading the dataset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCHIVE_MAGIC = b"MMDGADV1"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


@dataclass
class AdversarialArchive:
    indices: np.ndarray
    labels: np.ndarray
    clean: np.ndarray
    adversarial: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.adversarial = np.asarray(self.adversarial, dtype=np.float64)
        n = len(self.indices)
        if self.labels.shape != (n,) or len(self.clean) != n or self.clean.shape != self.adversarial.shape:
            raise ArchiveError(
                f"inconsistent archive arrays: indices {self.indices.shape}, labels {self.labels.shape}, "
                f"clean {self.clean.shape}, adversarial {self.adversarial.shape}"
            )

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def perturbation(self) -> np.ndarray:
        return self.adversarial - self.clean

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode()
        parts = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(meta)), meta, struct.pack("<I", len(self))]
        for i in range(len(self)):
            shape = self.clean[i].shape
            parts.append(struct.pack(f"<III{len(shape)}I", int(self.indices[i]), int(self.labels[i]), len(shape), *shape))
            parts.append(np.ascontiguousarray(self.clean[i], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(self.adversarial[i], dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> AdversarialArchive:
        reader = _Reader(data)
        if reader.take(8) != ARCHIVE_MAGIC:
            raise ArchiveError("not an adversarial archive (bad magic)")
        version, meta_len = reader.unpack("<II")
        if version != ARCHIVE_VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        try:
            meta = json.loads(reader.take(meta_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"corrupt archive metadata: {exc}") from None
        (count,) = reader.unpack("<I")
        indices, labels, clean, adv = [], [], [], []
        for _ in range(count):
            index, label, ndim = reader.unpack("<III")
            shape = reader.unpack(f"<{ndim}I")
            size = int(np.prod(shape))
            clean.append(np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape))
            adv.append(np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape))
            indices.append(index)
            labels.append(label)
        if reader.pos != len(data):
            raise ArchiveError(f"{len(data) - reader.pos} trailing bytes after {count} records")
        if len({a.shape for a in clean}) > 1:
            raise ArchiveError("records have mixed image shapes")
        stack = (lambda xs: np.stack(xs).astype(np.float64)) if count else (lambda xs: np.zeros((0,)))
        return cls(np.array(indices, dtype=np.int64), np.array(labels, dtype=np.int64), stack(clean), stack(adv), meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> AdversarialArchive:
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArchiveError(f"truncated archive: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
