"""Image-classification datasets: IDX and CIFAR-10 binary codecs, plus a
seeded synthetic generator so the pipeline runs without downloads."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """Malformed dataset bytes; ``offset`` locates the problem."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Images ``(N, C, H, W)`` in [0, 1] with integer labels.

    Arrays are marked read-only at construction.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {images.shape[0]} images")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, dict(self.meta))


# ---------------------------------------------------------------------------
# IDX


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX file. Labels come back as int64, images scaled to [0, 1]."""
    if len(data) < 4:
        raise DataFormatError("truncated IDX header", 0)
    magic = struct.unpack_from(">I", data, 0)[0]
    if magic == IDX_LABELS_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGES_MAGIC:
        ndim = 3
    else:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError("truncated IDX dimension list", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = 1
    for d in dims:
        count *= d
        if count > 2**40:
            raise DataFormatError(f"IDX dimensions {dims} overflow", 4)
    actual = len(data) - header
    if actual != count:
        raise DataFormatError(f"IDX payload: expected {count} bytes, got {actual}", header + min(actual, count))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if ndim == 1:
        return payload.astype(np.int64)
    return payload.astype(np.float64) / 255.0


def _to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)


def serialize_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ValueError("IDX image files hold single-channel images")
        images = images[:, 0]
    if images.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got {images.shape}")
    return struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + _to_bytes(images).tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("IDX labels must fit in one byte")
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def load_idx_dataset(image_bytes: bytes, label_bytes: bytes, num_classes: int = 10, split: str = "train") -> Dataset:
    images = parse_idx(image_bytes)
    labels = parse_idx(label_bytes)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError("expected an image file and a label file")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images[:, None], labels, num_classes, split)


# ---------------------------------------------------------------------------
# CIFAR-10


def parse_cifar10(data: bytes, split: str = "train") -> Dataset:
    if len(data) % CIFAR_RECORD:
        raise DataFormatError(
            f"CIFAR-10 length {len(data)} is not a multiple of {CIFAR_RECORD}",
            len(data) - len(data) % CIFAR_RECORD,
        )
    n = len(data) // CIFAR_RECORD
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataFormatError(f"CIFAR-10 label {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD)
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, split)


def serialize_cifar10(dataset: Dataset) -> bytes:
    if dataset.image_shape != (3, 32, 32):
        raise ValueError(f"CIFAR-10 records hold 3x32x32 images, got {dataset.image_shape}")
    n = len(dataset)
    out = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = _to_bytes(dataset.images).reshape(n, -1)
    return out.tobytes()


# ---------------------------------------------------------------------------
# synthetic patterns


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    image_shape: tuple[int, int, int] = (3, 32, 32)
    per_class_count: int = 100
    seed: int = 0
    noise: float = 0.06
    contrast_range: tuple[float, float] = (0.25, 0.4)


def _class_params(num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    # Fixed (seed-independent) orientation and spatial frequency per class.
    # Classes are laid out on an orientation x frequency grid whose spacing
    # (>= 30 degrees, an octave in frequency) is wide compared with the mild
    # resize/rotate transforms, so a transformed image keeps its class.
    n_freq = 2 if num_classes >= 4 else 1
    n_ang = -(-num_classes // n_freq)
    k = np.arange(num_classes)
    angles = np.pi * (k % n_ang) / n_ang
    freqs = np.array([1.6, 3.2])[k // n_ang]
    return angles, freqs


def synth_dataset(
    num_classes: int = 4,
    image_shape: tuple[int, int, int] = (3, 32, 32),
    per_class_count: int = 100,
    seed: int = 0,
    noise: float = 0.06,
    split: str = "train",
    contrast_range: tuple[float, float] = (0.25, 0.4),
) -> Dataset:
    """Oriented gratings, one orientation/frequency pair per class.

    Colour tint, phase, contrast and a soft blob position are drawn per
    image and Gaussian pixel noise is added, so the class is carried only
    by the texture.
    """
    if num_classes < 2:
        raise ValueError("synthetic dataset needs at least 2 classes")
    if per_class_count < 1:
        raise ValueError("per_class_count must be positive")
    c, h, w = image_shape
    if c < 1 or h < 8 or w < 8:
        raise ValueError(f"image_shape must be at least Cx8x8, got {image_shape}")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    angles, freqs = _class_params(num_classes)
    n = num_classes * per_class_count
    labels = np.repeat(np.arange(num_classes), per_class_count)
    rng.shuffle(labels)

    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    theta = angles[labels] + rng.normal(0, 0.06, n)
    freq = freqs[labels] * np.exp(rng.normal(0, 0.08, n))
    ph = rng.uniform(0, 2 * np.pi, n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    grating = 0.5 + 0.5 * np.sin(np.pi * freq[:, None, None] * proj + ph[:, None, None])

    cy, cx = rng.uniform(-0.6, 0.6, (2, n))
    blob = np.exp(-((yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2) / 0.18)
    contrast = rng.uniform(*contrast_range, n)
    base = 0.5 + contrast[:, None, None] * (grating - 0.5) * (0.6 + 0.4 * blob)

    tint = rng.uniform(0.4, 1.0, (n, c))
    images = 0.15 + 0.7 * tint[:, :, None, None] * base[:, None]
    images = images + rng.normal(0, noise, images.shape)
    images = np.clip(images, 0.0, 1.0)
    meta = {
        "source": "synth",
        "num_classes": num_classes,
        "image_shape": list(image_shape),
        "per_class_count": per_class_count,
        "seed": seed,
        "noise": noise,
        "contrast_range": list(contrast_range),
    }
    return Dataset(images, labels, num_classes, split, meta)


def synth_split(spec: SynthSpec, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Train/test pair drawn from disjoint seed streams."""
    train = synth_dataset(spec.num_classes, spec.image_shape, spec.per_class_count, spec.seed, spec.noise, "train", spec.contrast_range)
    test = synth_dataset(
        spec.num_classes, spec.image_shape, test_per_class, spec.seed + 1_000_003, spec.noise, "test", spec.contrast_range
    )
    return train, test
