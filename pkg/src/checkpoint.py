"""Binary codecs for model checkpoints and perturbation dumps.

Checkpoint (little-endian)::

    "RUAP" | version u8 | layer count u16 |
    per layer: kind u8 | rank u8 | input dims u32 * rank |
               weight count u64 | weights f64 * count |
               bias count u64 | biases f64 * count
    | CRC32 u32 of everything before it

Perturbation dump::

    "RUPT" | version u8 | H u32 | W u32 | C u32 | data f64 * (C*H*W), channel-major
"""

import struct
import zlib
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from aws_lambda_powertools import Logger

from classifier import Classifier, Layer, LayerKind
from core import ImageTensor
from errors import CheckpointError, ShapeError

logger = Logger(service="robust-uap")

MODEL_MAGIC = b"RUAP"
PERTURBATION_MAGIC = b"RUPT"
FORMAT_VERSION = 1


class _Reader:
    def __init__(self, content: bytes):
        self.content = content
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.content):
            raise CheckpointError("truncated file")
        chunk = self.content[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _read_header(reader: _Reader, magic: bytes) -> None:
    if reader.take(len(magic)) != magic:
        raise CheckpointError("bad magic")
    (version,) = reader.unpack("<B")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}")


# Model checkpoints
def encode_model(model: Classifier) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<BH", FORMAT_VERSION, len(model.layers))]
    for layer in model.layers:
        rank = len(layer.in_shape)
        parts.append(struct.pack(f"<BB{rank}I", int(layer.kind), rank, *layer.in_shape))
        parts.append(struct.pack("<Q", layer.weight.size))
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(struct.pack("<Q", layer.bias.size))
        parts.append(layer.bias.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _rebuild_layer(kind: LayerKind, in_shape: Tuple[int, ...], weights: np.ndarray, biases: np.ndarray) -> Layer:
    if kind == LayerKind.CONV3X3:
        if len(in_shape) != 3:
            raise CheckpointError("shape-chain violation: convolution needs a 3-d input")
        c, h, w = in_shape
        out_channels = biases.size
        if weights.size != out_channels * c * 9:
            raise CheckpointError("shape-chain violation: convolution weight count")
        return Layer(kind, in_shape, (out_channels, h, w), weights.reshape(out_channels, c, 3, 3), biases)
    if kind == LayerKind.DENSE:
        fan_in = int(np.prod(in_shape))
        out_features = biases.size
        if weights.size != out_features * fan_in:
            raise CheckpointError("shape-chain violation: dense weight count")
        return Layer(kind, in_shape, (out_features,), weights.reshape(out_features, fan_in), biases)
    if weights.size or biases.size:
        raise CheckpointError(f"shape-chain violation: {kind.name} layer carries parameters")
    if kind == LayerKind.RELU:
        return Layer(kind, in_shape, in_shape)
    if kind == LayerKind.FLATTEN:
        return Layer(kind, in_shape, (int(np.prod(in_shape)),))
    if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
        raise CheckpointError("shape-chain violation: pooling input")
    c, h, w = in_shape
    return Layer(kind, in_shape, (c, h // 2, w // 2))


def decode_model(content: bytes) -> Classifier:
    reader = _Reader(content)
    _read_header(reader, MODEL_MAGIC)
    if len(content) < reader.offset + 2 + 4:
        raise CheckpointError("truncated file")
    (stored_crc,) = struct.unpack("<I", content[-4:])
    if zlib.crc32(content[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch")
    reader.content = content[:-4]

    (layer_count,) = reader.unpack("<H")
    layers = []
    for _ in range(layer_count):
        kind_code, rank = reader.unpack("<BB")
        try:
            kind = LayerKind(kind_code)
        except ValueError:
            raise CheckpointError(f"unknown layer kind {kind_code}")
        in_shape = tuple(int(d) for d in reader.unpack(f"<{rank}I"))
        (weight_count,) = reader.unpack("<Q")
        weights = reader.floats(weight_count)
        (bias_count,) = reader.unpack("<Q")
        biases = reader.floats(bias_count)
        layers.append(_rebuild_layer(kind, in_shape, weights, biases))
    if reader.offset != len(reader.content):
        raise CheckpointError("trailing bytes after last layer")

    try:
        return Classifier(layers)
    except ShapeError as e:
        raise CheckpointError(str(e))


def save_model(model: Classifier, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model))
    logger.info(f"Saved model checkpoint to {path}")


def load_model(path: Union[str, Path]) -> Classifier:
    path = Path(path)
    try:
        content = path.read_bytes()
    except OSError as e:
        error_msg = f"Failed to read checkpoint {path}: {e}"
        logger.error(error_msg)
        raise CheckpointError(error_msg)
    return decode_model(content)


# Perturbation dumps
def encode_perturbation(u: ImageTensor) -> bytes:
    if u.ndim != 3:
        raise ShapeError(f"perturbation must be (channels, height, width), got {u.shape}")
    c, h, w = u.shape
    header = PERTURBATION_MAGIC + struct.pack("<BIII", FORMAT_VERSION, h, w, c)
    return header + np.ascontiguousarray(u, dtype="<f8").tobytes()


def decode_perturbation(content: bytes) -> ImageTensor:
    reader = _Reader(content)
    _read_header(reader, PERTURBATION_MAGIC)
    h, w, c = reader.unpack("<III")
    data = reader.floats(h * w * c)
    if reader.offset != len(content):
        raise CheckpointError("trailing bytes after perturbation data")
    return data.reshape(c, h, w)


def save_perturbation(u: ImageTensor, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_perturbation(u))
    logger.info(f"Saved perturbation dump to {path}")


def load_perturbation(path: Union[str, Path]) -> ImageTensor:
    path = Path(path)
    try:
        content = path.read_bytes()
    except OSError as e:
        error_msg = f"Failed to read perturbation {path}: {e}"
        logger.error(error_msg)
        raise CheckpointError(error_msg)
    return decode_perturbation(content)
