import pytest
import sys
import os
import struct
import zlib
from types import SimpleNamespace

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from checkpoint import (
    decode_model,
    decode_perturbation,
    encode_model,
    encode_perturbation,
    load_model,
    load_perturbation,
    save_model,
    save_perturbation,
)
from classifier import build_cifar_model, build_toy_model, dense
from datasets import CIFAR_SHAPE, TOY_SHAPE
from errors import CheckpointError, ShapeError


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


class TestModelCheckpoint:
    """Test the model checkpoint codec"""

    @pytest.mark.parametrize("build", [build_toy_model, build_cifar_model])
    def test_round_trip_preserves_predictions(self, build):
        model = build(seed=1)
        shape = TOY_SHAPE if model.input_shape == TOY_SHAPE else CIFAR_SHAPE
        images = np.random.default_rng(0).uniform(size=(3,) + shape)

        restored = decode_model(encode_model(model))

        assert np.array_equal(restored.forward_batch(images), model.forward_batch(images))
        for original, copy in zip(model.layers, restored.layers):
            assert copy.kind == original.kind
            assert copy.out_shape == original.out_shape

    def test_save_and_load(self, tmp_path):
        model = build_toy_model(seed=2)
        path = tmp_path / "nested" / "toy.ruap"

        save_model(model, path)

        assert path.read_bytes()[:4] == b"RUAP"
        assert np.array_equal(load_model(path).layers[0].weight, model.layers[0].weight)

    def test_bad_magic(self):
        content = encode_model(build_toy_model(seed=0))

        with pytest.raises(CheckpointError, match="bad magic"):
            decode_model(b"XXXX" + content[4:])

    def test_unsupported_version(self):
        content = bytearray(encode_model(build_toy_model(seed=0)))
        content[4] = 9

        with pytest.raises(CheckpointError, match="unsupported version 9"):
            decode_model(bytes(content))

    def test_checksum_mismatch(self):
        content = bytearray(encode_model(build_toy_model(seed=0)))
        content[40] ^= 0xFF

        with pytest.raises(CheckpointError, match="checksum mismatch"):
            decode_model(bytes(content))

    def test_truncated_file(self):
        with pytest.raises(CheckpointError, match="truncated file"):
            decode_model(b"RUAP")

    def test_shape_chain_violation(self):
        broken = SimpleNamespace(layers=[dense(TOY_SHAPE, 2), dense((3,), 2)])

        with pytest.raises(CheckpointError, match="shape-chain violation"):
            decode_model(encode_model(broken))

    def test_weight_count_mismatch(self):
        body = bytearray(encode_model(build_toy_model(seed=0))[:-4])
        # first layer's weight count sits after magic, version, layer count, kind, rank and 3 dims
        offset = 4 + 1 + 2 + 1 + 1 + 12
        body[offset : offset + 8] = struct.pack("<Q", 1)

        with pytest.raises(CheckpointError):
            decode_model(_with_crc(bytes(body)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="Failed to read checkpoint"):
            load_model(tmp_path / "missing.ruap")


class TestPerturbationDump:
    """Test the RUPT perturbation dump format"""

    def test_header_layout(self):
        u = np.arange(24, dtype=np.float64).reshape(2, 3, 4)

        content = encode_perturbation(u)

        assert content[:4] == b"RUPT"
        assert struct.unpack("<BIII", content[4:17]) == (1, 3, 4, 2)
        assert len(content) == 17 + 8 * 24
        assert np.array_equal(np.frombuffer(content[17:], dtype="<f8"), u.ravel())

    def test_round_trip(self, tmp_path):
        u = np.random.default_rng(0).normal(size=(3, 5, 5))

        save_perturbation(u, tmp_path / "u.rupt")

        assert np.array_equal(load_perturbation(tmp_path / "u.rupt"), u)

    def test_rejects_flat_array(self):
        with pytest.raises(ShapeError):
            encode_perturbation(np.zeros(4))

    def test_trailing_bytes(self):
        content = encode_perturbation(np.zeros((1, 2, 2))) + b"\x00"

        with pytest.raises(CheckpointError, match="trailing bytes"):
            decode_perturbation(content)

    def test_truncated_data(self):
        content = encode_perturbation(np.zeros((1, 2, 2)))[:-8]

        with pytest.raises(CheckpointError, match="truncated file"):
            decode_perturbation(content)
