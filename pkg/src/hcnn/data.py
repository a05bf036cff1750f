"""Dataset ingestion: CIFAR binary loaders, per-channel standardization and
small synthetic sets for fast training tests.

Images are float32 arrays laid out ``(count, N, N, 3)`` (colour last).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, MissingFileError

STD_FLOOR = 1e-8
PIXELS = 32 * 32 * 3

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]
TRAIN_COUNT, TEST_COUNT = 50_000, 10_000


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    mean: np.ndarray | None = None  # statistics used to standardize, if any
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, n: int | None) -> "LabeledImageSet":
        """The first ``n`` records (all of them for ``None``)."""
        if n is None or n >= len(self):
            return self
        return replace(self, images=self.images[:n], labels=self.labels[:n])


# --- CIFAR binaries -------------------------------------------------------

def decode_records(raw: bytes, label_bytes: int, label_index: int, where: str = "buffer"):
    """Split CIFAR records into ``(images uint8 (n, 32, 32, 3), labels int64)``.

    Each record is ``label_bytes`` label bytes followed by 3072 pixel bytes
    stored channel-planar (all R, then G, then B, each row-major 32x32).
    """
    rec = label_bytes + PIXELS
    if len(raw) % rec:
        raise DataError(f"{where}: truncated, {len(raw)} bytes is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_index].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def _read_files(root, names, label_bytes, label_index):
    imgs, labs = [], []
    for name in names:
        p = os.path.join(root, name)
        try:
            with open(p, "rb") as f:
                raw = f.read()
        except FileNotFoundError:
            raise MissingFileError(f"missing CIFAR file {p}") from None
        i, l = decode_records(raw, label_bytes, label_index, p)
        imgs.append(i)
        labs.append(l)
    return np.concatenate(imgs), np.concatenate(labs)


def _locate(path, names, subdir):
    for root in (path, os.path.join(path, subdir)):
        if os.path.isfile(os.path.join(root, names[0])):
            return root
    raise MissingFileError(f"no {names[0]} under {path} or {os.path.join(path, subdir)}")


def _load(path, train_names, test_names, subdir, label_bytes, label_index, num_classes,
          standardize, expected):
    root = _locate(path, train_names, subdir)
    splits = []
    for split, names, count in (("train", train_names, expected[0]), ("test", test_names, expected[1])):
        raw, labels = _read_files(root, names, label_bytes, label_index)
        if count is not None and len(labels) != count:
            raise DataError(f"{split} split has {len(labels)} records, expected {count}")
        if labels.size and labels.max() >= num_classes:
            raise DataError(f"{split} split has label {labels.max()} >= {num_classes}")
        splits.append(LabeledImageSet(raw.astype(np.float32) / 255.0, labels, split))
    train, test = splits
    return standardize_pair(train, test) if standardize else (train, test)


def load_cifar10(path, standardize=True, expected=(TRAIN_COUNT, TEST_COUNT)):
    """CIFAR-10 binary version (``data_batch_{1..5}.bin``, ``test_batch.bin``)
    from ``path`` or ``path/cifar-10-batches-bin``. Pass ``expected=(None,
    None)`` to skip the record-count check."""
    return _load(path, CIFAR10_TRAIN, CIFAR10_TEST, "cifar-10-batches-bin", 1, 0, 10,
                 standardize, expected)


def load_cifar100(path, standardize=True, expected=(TRAIN_COUNT, TEST_COUNT)):
    """CIFAR-100 binary version (``train.bin``, ``test.bin``), fine labels."""
    return _load(path, CIFAR100_TRAIN, CIFAR100_TEST, "cifar-100-binary", 2, 1, 100,
                 standardize, expected)


# --- standardization -------------------------------------------------------

def channel_stats(images: np.ndarray):
    x = images.reshape(-1, images.shape[-1]).astype(np.float64)
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def apply_standardization(ds: LabeledImageSet, mean, std) -> LabeledImageSet:
    mean = np.asarray(mean, np.float64)
    std = np.asarray(std, np.float64)
    images = ((ds.images - mean) / std).astype(np.float32)
    return replace(ds, images=images, mean=mean, std=std)


def standardize_pair(train: LabeledImageSet, test: LabeledImageSet | None = None):
    """Standardize both splits per RGB channel with training statistics."""
    mean, std = channel_stats(train.images)
    train = apply_standardization(train, mean, std)
    if test is not None:
        test = apply_standardization(test, mean, std)
    return train, test


# --- synthetic data ----------------------------------------------------------

def _class_colours(num_classes: int) -> np.ndarray:
    # distinct points on a sphere around mid-grey: each is a vertex of the
    # convex hull, so every class is linearly separable from the rest
    i = np.arange(num_classes) + 0.5
    phi = np.arccos(1 - 2 * i / num_classes)
    theta = np.pi * (1 + 5 ** 0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)
    return 0.5 + 0.35 * pts


def synth_dataset(kind: str = "easy", count: int = 200, seed: int = 0, num_classes: int = 10,
                  size: int = 32, split: str = "train") -> LabeledImageSet:
    """Reproducible toy classification set with pixel values in ``[0, 1]``.

    ``easy``: every class has its own mean colour; per-pixel noise is too
    small to cross between classes, so channel means separate them linearly.
    ``gratings``: oriented sinusoidal gratings with random phase, frequency and
    tint; the class is the orientation bin.
    """
    if count < 0 or num_classes < 1:
        raise DataError("synthetic set needs count >= 0 and num_classes >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    if kind == "easy":
        colours = _class_colours(num_classes)
        noise = rng.uniform(-0.05, 0.05, size=(count, size, size, 3))
        images = colours[labels][:, None, None, :] + noise
    elif kind == "gratings":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        angle = (labels + rng.uniform(-0.3, 0.3, count)) * np.pi / num_classes
        freq = rng.uniform(0.1, 0.25, count) * 2 * np.pi  # radians per pixel
        phase = rng.uniform(0, 2 * np.pi, count)
        proj = (np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy)
        wave = np.sin(freq[:, None, None] * proj + phase[:, None, None])
        tint = rng.uniform(0.6, 1.0, size=(count, 1, 1, 3))
        images = 0.5 + 0.4 * wave[..., None] * tint
        images += rng.normal(0, 0.05, size=images.shape)
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    return LabeledImageSet(np.clip(images, 0, 1).astype(np.float32), labels, split)


def load_raw(data, size: int = 32, num_classes: int = 10):
    """Unstandardized ``(train, test)`` for a :class:`~hcnn.config.DataConfig`,
    cut to the configured subsets."""
    if data.kind == "cifar10":
        train, test = load_cifar10(data.path, standardize=False)
    elif data.kind == "cifar100":
        train, test = load_cifar100(data.path, standardize=False)
    else:
        train = synth_dataset(data.synthetic_kind, data.synthetic_train, data.synthetic_seed,
                              num_classes, size, "train")
        test = synth_dataset(data.synthetic_kind, data.synthetic_test, data.synthetic_seed + 1,
                             num_classes, size, "test")
    if train.images.shape[1] != size:
        raise DataError(f"images are {train.images.shape[1]} pixels wide, network expects {size}")
    if train.num_classes > num_classes:
        raise DataError(f"dataset has {train.num_classes} classes, network has {num_classes}")
    return train.subset(data.train_subset), test.subset(data.test_subset)


def load_dataset(data, size: int = 32, num_classes: int = 10):
    """Standardized ``(train, test)``; statistics come from the training subset."""
    return standardize_pair(*load_raw(data, size, num_classes))
