"""Labeled image datasets: CIFAR-10 binary records and the synthetic toy set."""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from aws_lambda_powertools import Logger

from errors import DatasetError

logger = Logger(service="robust-uap")

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10

TOY_SHAPE = (1, 8, 8)
TOY_MIN_MARGIN = 0.12
TOY_MAX_MARGIN = 0.3
TOY_NOISE = 0.1


@dataclass
class LabeledDataset:
    """Images stacked as ``(n, channels, height, width)`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels in {self.name}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels of {self.name} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, start: int, count: int, name: Optional[str] = None) -> "LabeledDataset":
        if start < 0 or count < 1 or start + count > len(self):
            raise DatasetError(
                f"cannot take {count} records from offset {start} of {self.name} ({len(self)} records)"
            )
        return LabeledDataset(
            images=self.images[start : start + count],
            labels=self.labels[start : start + count],
            name=name or self.name,
            num_classes=self.num_classes,
        )


def parse_cifar10(content: bytes, name: str = "cifar10") -> LabeledDataset:
    if len(content) == 0:
        raise DatasetError("empty dataset")
    if len(content) % CIFAR_RECORD_BYTES:
        raise DatasetError("truncated record")

    records = np.frombuffer(content, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DatasetError(f"bad label {labels[bad]} in record {bad}")

    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return LabeledDataset(images=images, labels=labels, name=name, num_classes=CIFAR_CLASSES)


def load_cifar10(path: Union[str, Path]) -> LabeledDataset:
    """Load a CIFAR-10 binary batch file (label byte + 3072 channel-major pixels)."""
    path = Path(path)
    try:
        content = path.read_bytes()
    except OSError as e:
        error_msg = f"Failed to read CIFAR-10 file {path}: {e}"
        logger.error(error_msg)
        raise DatasetError(error_msg)

    dataset = parse_cifar10(content, name=path.name)
    logger.info(f"Loaded {len(dataset)} CIFAR-10 records from {path}")
    return dataset


def dump_cifar10(dataset: LabeledDataset) -> bytes:
    if dataset.image_shape != CIFAR_SHAPE:
        raise DatasetError(f"{dataset.name} does not hold 32x32x3 images")
    pixels = np.rint(dataset.images * 255.0).clip(0, 255).astype(np.uint8)
    records = np.empty((len(dataset), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    records[:, 1:] = pixels.reshape(len(dataset), -1)
    return records.tobytes()


def gen_toy_dataset(n: int, seed: int) -> LabeledDataset:
    """Two-class 8x8x1 images separated by left-half vs right-half brightness.

    Label 1 when the left half is brighter on average, 0 otherwise. The mean
    difference is at least ``TOY_MIN_MARGIN`` in magnitude. Classes alternate so
    any ``n >= 2`` is balanced to within one image.
    """
    if n < 2:
        raise DatasetError(f"toy dataset needs at least 2 images, got {n}")

    rng = np.random.default_rng(seed)
    _, height, width = TOY_SHAPE
    half = width // 2
    labels = np.arange(n, dtype=np.int64) % 2
    images = np.empty((n,) + TOY_SHAPE, dtype=np.float64)

    for i, label in enumerate(labels):
        noise = rng.uniform(-TOY_NOISE, TOY_NOISE, size=(height, width))
        noise[:, :half] -= noise[:, :half].mean()
        noise[:, half:] -= noise[:, half:].mean()
        margin = rng.uniform(TOY_MIN_MARGIN, TOY_MAX_MARGIN)
        sign = 1.0 if label == 1 else -1.0
        img = 0.5 + noise
        img[:, :half] += sign * margin / 2.0
        img[:, half:] -= sign * margin / 2.0
        images[i, 0] = img

    return LabeledDataset(images=images, labels=labels, name=f"toy-{n}-{seed}", num_classes=2)
