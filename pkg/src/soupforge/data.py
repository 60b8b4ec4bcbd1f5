"""Datasets: IDX files, seeded synthetic blobs, and the bundled 8x8 digits."""

import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class ImageBatch:
    """Images in [0, 1] laid out (N, C, H, W) with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ImageBatch(self.images[idx], self.labels[idx])


@dataclass
class IdxDataset:
    images: np.ndarray  # (count, H, W) uint8
    labels: np.ndarray  # (count,) uint8

    def to_batch(self, dtype=np.float32):
        x = (self.images.astype(np.float64) / 255.0).astype(dtype)
        return ImageBatch(x[:, None], self.labels.astype(np.int64))


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) < head + size:
        raise IdxFormatError(
            f"{path}: truncated payload at byte offset {len(raw)}, expected {head + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path):
    """Parse an IDX image file (u8, 3 dims) and label file (u8, 1 dim)."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return IdxDataset(images.copy(), labels.copy())


def write_idx(images_path, labels_path, dataset):
    images = np.asarray(dataset.images, dtype=np.uint8)
    labels = np.asarray(dataset.labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    size: int = 16
    per_class: int = 100
    blobs: int = 3
    margin: float = 4.0  # prototype contrast over per-pixel noise std


def synth_dataset(spec, seed):
    """Seeded Gaussian-blob class prototypes plus pixel noise, quantized to u8.

    Each class owns ``spec.blobs`` blobs at random centres.  Samples are the
    class prototype plus Gaussian noise of std ``1 / spec.margin``, so a
    larger margin separates classes further.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:spec.size, 0:spec.size]
    protos = np.zeros((spec.classes, spec.size, spec.size))
    for c in range(spec.classes):
        for _ in range(spec.blobs):
            cy, cx = rng.uniform(0, spec.size - 1, size=2)
            width = rng.uniform(0.1, 0.2) * spec.size
            protos[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        protos[c] /= protos[c].max()
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    rng.shuffle(labels)
    noise = rng.normal(0.0, 1.0 / spec.margin, size=(len(labels), spec.size, spec.size))
    images = np.clip(protos[labels] + noise, 0.0, 1.0)
    return IdxDataset(np.round(images * 255).astype(np.uint8), labels.astype(np.uint8))


def digits_dataset(size=16):
    """scikit-learn's bundled 8x8 digits, nearest-upsampled to ``size`` and put on the u8 grid."""
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = d.images / 16.0
    if size % 8:
        raise ValueError("size must be a multiple of 8")
    f = size // 8
    imgs = np.repeat(np.repeat(imgs, f, axis=1), f, axis=2)
    return IdxDataset(np.round(imgs * 255).astype(np.uint8), d.target.astype(np.uint8))


def split(dataset, test_fraction, seed):
    """Seeded train/test split of an :class:`IdxDataset`."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.labels))
    n_test = int(round(test_fraction * len(order)))
    te, tr = np.sort(order[:n_test]), np.sort(order[n_test:])
    return (IdxDataset(dataset.images[tr], dataset.labels[tr]),
            IdxDataset(dataset.images[te], dataset.labels[te]))
