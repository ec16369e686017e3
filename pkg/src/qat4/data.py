"""CIFAR-10/100 binary loaders, augmentation and batching."""

import os
from dataclasses import dataclass

import numpy as np

from .errors import CorruptDataError

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR100_TRAIN_FILES = ("train.bin",)
CIFAR100_TEST_FILES = ("test.bin",)

# Random-stream identifiers mixed into the master seed.
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3


@dataclass
class Dataset:
    """Images are held as raw uint8 (values 0..255) and promoted per batch."""

    images: np.ndarray  # M x 3 x 32 x 32, uint8
    labels: np.ndarray  # M, int64
    split: str
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        n = min(n, len(self))
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


@dataclass
class AugmentConfig:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5
    mean: tuple = CIFAR10_MEAN
    std: tuple = CIFAR10_STD

    def __post_init__(self):
        if self.crop > 32 + 2 * self.pad:
            raise ValueError("crop larger than the padded image")

    @classmethod
    def for_dataset(cls, name):
        if name == "cifar100":
            return cls(mean=CIFAR100_MEAN, std=CIFAR100_STD)
        return cls()


def _find_dir(root, names):
    for d in (root, os.path.join(root, "cifar-10-batches-bin"),
              os.path.join(root, "cifar-100-binary")):
        if all(os.path.isfile(os.path.join(d, n)) for n in names):
            return d
    raise CorruptDataError(f"{root}: missing files {', '.join(names)}")


def _read_records(path, label_bytes, label_index, num_classes, expected):
    record = label_bytes + PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record or (expected is not None and raw.size != expected * record):
        want = f"{expected} records" if expected is not None else f"a multiple of {record} bytes"
        raise CorruptDataError(f"{path}: size {raw.size} bytes, expected {want}")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_index].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise CorruptDataError(f"{path}: label {labels.max()} outside [0, {num_classes})")
    images = raw[:, label_bytes:].reshape(-1, *IMAGE_SHAPE)
    return images, labels


def _load(root, train_files, test_files, label_bytes, label_index, num_classes,
          per_file, strict):
    out = []
    for split, names in (("train", train_files), ("test", test_files)):
        d = _find_dir(root, names)
        parts = [_read_records(os.path.join(d, n), label_bytes, label_index, num_classes,
                               per_file[split] if strict else None) for n in names]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        out.append(Dataset(np.ascontiguousarray(images), labels, split, num_classes))
    return tuple(out)


def load_cifar10(root, strict=True):
    """Read the binary CIFAR-10 distribution.

    Each record is one label byte followed by 3072 pixel bytes (R, G, B
    planes). With ``strict`` every batch file must hold exactly 10,000
    records.
    """
    return _load(root, CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES, 1, 0, 10,
                 {"train": 10_000, "test": 10_000}, strict)


def load_cifar100(root, strict=True):
    """Read the binary CIFAR-100 distribution (coarse, fine label bytes; fine kept)."""
    return _load(root, CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES, 2, 1, 100,
                 {"train": 50_000, "test": 10_000}, strict)


def load_dataset(name, root, strict=True):
    if name == "cifar10":
        return load_cifar10(root, strict)
    if name == "cifar100":
        return load_cifar100(root, strict)
    raise ValueError(f"unknown dataset {name!r}")


def normalize(images, cfg):
    """Scale raw 0..255 pixels to [0, 1] and standardize per channel."""
    x = np.asarray(images, dtype=np.float32) / np.float32(255.0)
    mean = np.asarray(cfg.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(cfg.std, dtype=np.float32).reshape(3, 1, 1)
    return (x - mean) / std


def denormalize(x, cfg):
    mean = np.asarray(cfg.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(cfg.std, dtype=np.float32).reshape(3, 1, 1)
    return (x * std + mean) * np.float32(255.0)


def crop_flip(images, offsets, flips, pad=4, crop=32):
    """Zero-pad, crop at per-image ``(dy, dx)`` offsets and mirror where ``flips``."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
        offsets = np.asarray(offsets).reshape(1, 2)
        flips = np.asarray(flips).reshape(1)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n = images.shape[0]
    rows = offsets[:, 0, None] + np.arange(crop)          # n x crop
    cols = offsets[:, 1, None] + np.arange(crop)
    cols = np.where(np.asarray(flips)[:, None], cols[:, ::-1], cols)
    out = padded[np.arange(n)[:, None, None, None], np.arange(images.shape[1])[None, :, None, None],
                 rows[:, None, :, None], cols[:, None, None, :]]
    return out[0] if single else out


def draw_augmentation(rng, n, cfg):
    offsets = rng.integers(0, 2 * cfg.pad + 32 - cfg.crop + 1, size=(n, 2))
    flips = rng.random(n) < cfg.hflip_prob
    return offsets, flips


def augment_and_normalize(img, cfg, rng, training=True):
    """Single image: random crop + flip (training only), then normalize."""
    img = np.asarray(img, dtype=np.float32)
    if training:
        offsets, flips = draw_augmentation(rng, 1, cfg)
        img = crop_flip(img, offsets[0], flips[0], cfg.pad, cfg.crop)
    return normalize(img, cfg)


def epoch_augmentation(seed, epoch, n, cfg):
    """Crop offsets and flips for every example of an epoch, indexed by example."""
    rng = np.random.default_rng([seed, STREAM_AUGMENT, epoch])
    return draw_augmentation(rng, n, cfg)


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, STREAM_SHUFFLE, epoch]).permutation(n)


def batch_iter(dataset, batch_size=128, seed=0, epoch=0, augment=None, norm=None,
               shuffle=True):
    """Yield ``(images, labels)`` batches covering every example once.

    ``augment`` (an AugmentConfig) turns on training-time crop/flip; ``norm``
    alone only normalizes. With neither, raw float32 pixels are returned.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = epoch_order(seed, epoch, n) if shuffle else np.arange(n)
    if augment is not None:
        offsets, flips = epoch_augmentation(seed, epoch, n, augment)
        norm = augment
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        imgs = dataset.images[idx]
        if augment is not None:
            imgs = crop_flip(imgs, offsets[idx], flips[idx], augment.pad, augment.crop)
        x = normalize(imgs, norm) if norm is not None else imgs.astype(np.float32)
        yield np.ascontiguousarray(x, dtype=np.float32), dataset.labels[idx]


def num_batches(n, batch_size):
    return -(-n // batch_size)


def write_cifar_binary(path, images, labels, coarse_labels=None):
    """Write records in the CIFAR binary layout (used for fixtures and subsets)."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    np.concatenate(cols + [images], axis=1).tofile(path)
