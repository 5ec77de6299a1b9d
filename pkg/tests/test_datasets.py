import pytest
import sys
import os

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from datasets import (
    CIFAR_RECORD_BYTES,
    TOY_MIN_MARGIN,
    dump_cifar10,
    gen_toy_dataset,
    load_cifar10,
    parse_cifar10,
)
from errors import DatasetError


def _record(label: int, pixel: int = 0) -> bytes:
    return bytes([label]) + bytes([pixel]) * (CIFAR_RECORD_BYTES - 1)


class TestCifar10:
    """Test the CIFAR-10 binary loader"""

    def test_single_record_scaling(self):
        data = parse_cifar10(_record(7, 255))

        assert len(data) == 1
        assert data.labels.tolist() == [7]
        assert data.images.shape == (1, 3, 32, 32)
        assert np.all(data.images == 1.0)

    def test_channel_major_pixels(self):
        content = bytearray(_record(0))
        content[1] = 10          # R at (0, 0)
        content[1 + 1024] = 20   # G at (0, 0)
        content[1 + 33] = 30     # R at (1, 1)

        image = parse_cifar10(bytes(content)).images[0]

        assert image[0, 0, 0] == 10 / 255.0
        assert image[1, 0, 0] == 20 / 255.0
        assert image[0, 1, 1] == 30 / 255.0

    def test_truncated_record(self):
        with pytest.raises(DatasetError, match="truncated record"):
            parse_cifar10(b"\x00" * 3072)

    def test_bad_label(self):
        with pytest.raises(DatasetError, match="bad label"):
            parse_cifar10(_record(3) + _record(10))

    def test_empty_file(self):
        with pytest.raises(DatasetError, match="empty dataset"):
            parse_cifar10(b"")

    def test_order_preserved(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(_record(4, 1) + _record(2, 2))

        data = load_cifar10(path)

        assert len(data) == 2
        assert data.labels.tolist() == [4, 2]
        assert data.name == "data_batch_1.bin"

    def test_round_trip_reproduces_bytes(self):
        rng = np.random.default_rng(0)
        records = [bytes([int(rng.integers(10))]) + rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes() for _ in range(5)]
        content = b"".join(records)

        assert dump_cifar10(parse_cifar10(content)) == content

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="Failed to read"):
            load_cifar10(tmp_path / "nope.bin")


class TestToyDataset:
    """Test the synthetic two-class generator"""

    def test_same_seed_identical(self):
        a, b = gen_toy_dataset(50, seed=3), gen_toy_dataset(50, seed=3)

        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_two_images_one_per_class(self):
        data = gen_toy_dataset(2, seed=0)

        assert sorted(data.labels.tolist()) == [0, 1]
        assert data.image_shape == (1, 8, 8)

    def test_class_is_sign_of_half_difference(self):
        data = gen_toy_dataset(200, seed=1)

        diff = data.images[:, 0, :, :4].mean(axis=(1, 2)) - data.images[:, 0, :, 4:].mean(axis=(1, 2))

        assert np.array_equal(diff > 0, data.labels == 1)
        assert np.all(np.abs(diff) >= TOY_MIN_MARGIN - 1e-12)

    def test_too_small(self):
        with pytest.raises(DatasetError):
            gen_toy_dataset(1, seed=0)

    def test_subset(self):
        data = gen_toy_dataset(10, seed=0)

        part = data.subset(4, 3)

        assert len(part) == 3
        assert np.array_equal(part.images, data.images[4:7])
        with pytest.raises(DatasetError):
            data.subset(8, 3)
