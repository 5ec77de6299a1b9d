"""A small fixed-topology CNN with hand-derived backpropagation.

Layers operate on batches shaped ``(n,) + layer.in_shape``. Gradients w.r.t. the
input image are exact (up to floating point) and are what every attack uses.
"""

import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from aws_lambda_powertools import Logger
from numpy.lib.stride_tricks import sliding_window_view

from core import argmax_labels
from datasets import CIFAR_SHAPE, TOY_SHAPE, LabeledDataset
from errors import DatasetError, InvalidArgumentError, NonFiniteError, ShapeError
from models import TrainConfig

logger = Logger(service="robust-uap")


class LayerKind(IntEnum):
    CONV3X3 = 1
    RELU = 2
    MAXPOOL2X2 = 3
    FLATTEN = 4
    DENSE = 5


_PARAMETRIC = (LayerKind.CONV3X3, LayerKind.DENSE)


@dataclass
class Layer:
    kind: LayerKind
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        n = x.shape[0]
        if self.kind == LayerKind.CONV3X3:
            padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
            windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
            y = np.einsum("nchwij,ocij->nohw", windows, self.weight, optimize=True)
            return y + self.bias[None, :, None, None], windows
        if self.kind == LayerKind.RELU:
            return np.maximum(x, 0.0), x > 0
        if self.kind == LayerKind.MAXPOOL2X2:
            c, h, w = self.in_shape
            blocks = (
                x.reshape(n, c, h // 2, 2, w // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h // 2, w // 2, 4)
            )
            arg = np.argmax(blocks, axis=-1)
            y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
            return y, arg
        if self.kind == LayerKind.FLATTEN:
            return x.reshape(n, -1), None
        flat = x.reshape(n, -1)
        return flat @ self.weight.T + self.bias, flat

    def backward(
        self, grad_out: np.ndarray, cache: Any
    ) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        """Return (grad wrt input, grad wrt weight, grad wrt bias)."""
        n = grad_out.shape[0]
        if self.kind == LayerKind.CONV3X3:
            windows = cache
            grad_w = np.einsum("nohw,nchwij->ocij", grad_out, windows, optimize=True)
            grad_b = grad_out.sum(axis=(0, 2, 3))
            c, h, w = self.in_shape
            grad_padded = np.zeros((n, c, h + 2, w + 2))
            for i in range(3):
                for j in range(3):
                    grad_padded[:, :, i : i + h, j : j + w] += np.einsum(
                        "nohw,oc->nchw", grad_out, self.weight[:, :, i, j], optimize=True
                    )
            return grad_padded[:, :, 1:-1, 1:-1], grad_w, grad_b
        if self.kind == LayerKind.RELU:
            return grad_out * cache, None, None
        if self.kind == LayerKind.MAXPOOL2X2:
            c, h, w = self.in_shape
            routed = np.zeros((n, c, h // 2, w // 2, 4))
            np.put_along_axis(routed, cache[..., None], grad_out[..., None], axis=-1)
            grad_in = (
                routed.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            return grad_in, None, None
        if self.kind == LayerKind.FLATTEN:
            return grad_out.reshape((n,) + self.in_shape), None, None
        flat = cache
        grad_in = (grad_out @ self.weight).reshape((n,) + self.in_shape)
        return grad_in, grad_out.T @ flat, grad_out.sum(axis=0)


# Layer constructors
def conv3x3(in_shape: Sequence[int], out_channels: int, rng: Optional[np.random.Generator] = None) -> Layer:
    c, h, w = in_shape
    weight = np.zeros((out_channels, c, 3, 3))
    if rng is not None:
        weight = rng.normal(0.0, np.sqrt(2.0 / (c * 9)), size=weight.shape)
    return Layer(LayerKind.CONV3X3, (c, h, w), (out_channels, h, w), weight, np.zeros(out_channels))


def relu(in_shape: Sequence[int]) -> Layer:
    return Layer(LayerKind.RELU, tuple(in_shape), tuple(in_shape))


def maxpool2x2(in_shape: Sequence[int]) -> Layer:
    c, h, w = in_shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial size, got {h}x{w}")
    return Layer(LayerKind.MAXPOOL2X2, (c, h, w), (c, h // 2, w // 2))


def flatten(in_shape: Sequence[int]) -> Layer:
    return Layer(LayerKind.FLATTEN, tuple(in_shape), (int(np.prod(in_shape)),))


def dense(in_shape: Sequence[int], out_features: int, rng: Optional[np.random.Generator] = None) -> Layer:
    fan_in = int(np.prod(in_shape))
    weight = np.zeros((out_features, fan_in))
    if rng is not None:
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=weight.shape)
    return Layer(LayerKind.DENSE, tuple(in_shape), (out_features,), weight, np.zeros(out_features))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row loss and gradient w.r.t. the logits."""
    peak = logits.max(axis=1, keepdims=True)
    lse = peak + np.log(np.exp(logits - peak).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    losses = lse[:, 0] - logits[rows, labels]
    grad = np.exp(logits - lse)
    grad[rows, labels] -= 1.0
    return losses, grad


class Classifier:
    """Sequential network over image tensors, logits out."""

    def __init__(self, layers: List[Layer]):
        if not layers:
            raise ShapeError("a classifier needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_shape != nxt.in_shape:
                raise ShapeError(
                    f"shape-chain violation: {prev.kind.name} outputs {prev.out_shape}, "
                    f"{nxt.kind.name} expects {nxt.in_shape}"
                )
        if len(layers[-1].out_shape) != 1:
            raise ShapeError("shape-chain violation: last layer must produce a logit vector")
        for layer in layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NonFiniteError(f"non-finite parameters in {layer.kind.name} layer")
        self.layers = layers

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_shape[0]

    def _check_batch(self, images: np.ndarray) -> None:
        if images.ndim != len(self.input_shape) + 1 or images.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {images.shape[1:]} does not match model input {self.input_shape}"
            )

    def _check_labels(self, labels: np.ndarray) -> None:
        if np.any(labels < 0) or np.any(labels >= self.num_classes):
            raise InvalidArgumentError(f"label outside [0, {self.num_classes})")

    def _forward_cached(self, images: np.ndarray) -> Tuple[np.ndarray, List[Any]]:
        caches = []
        out = images
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def _backward(
        self, caches: List[Any], grad_logits: np.ndarray
    ) -> Tuple[np.ndarray, List[Tuple[Optional[np.ndarray], Optional[np.ndarray]]]]:
        grad = grad_logits
        param_grads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, grad_w, grad_b = layer.backward(grad, cache)
            param_grads.append((grad_w, grad_b))
        param_grads.reverse()
        return grad, param_grads

    def forward_batch(self, images: np.ndarray) -> np.ndarray:
        self._check_batch(images)
        logits, _ = self._forward_cached(images)
        return logits

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_batch(x[None])[0]

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return argmax_labels(self.forward_batch(images))

    def predict(self, x: np.ndarray) -> int:
        return int(self.predict_batch(x[None])[0])

    def input_grad_batch(self, images: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-image cross-entropy losses and their gradients w.r.t. each image."""
        self._check_batch(images)
        labels = np.asarray(labels, dtype=np.int64)
        self._check_labels(labels)
        logits, caches = self._forward_cached(images)
        losses, grad_logits = softmax_cross_entropy(logits, labels)
        grad, _ = self._backward(caches, grad_logits)
        return losses, grad

    def input_grad(self, x: np.ndarray, target_label: int) -> Tuple[float, np.ndarray]:
        losses, grads = self.input_grad_batch(x[None], np.array([target_label]))
        return float(losses[0]), grads[0]

    def logit_jacobian(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Logits of x and the gradient of every logit w.r.t. x, stacked by class."""
        batch = np.repeat(x[None], self.num_classes, axis=0)
        self._check_batch(batch)
        logits, caches = self._forward_cached(batch)
        grad, _ = self._backward(caches, np.eye(self.num_classes))
        return logits[0], grad

    def accuracy(self, dataset: LabeledDataset) -> float:
        return float(np.mean(self.predict_batch(dataset.images) == dataset.labels))


# Reference topologies
class Topology(str, Enum):
    TOY = "toy"
    CIFAR = "cifar"


def build_toy_model(seed: int) -> Classifier:
    """Dense(64->32) -> ReLU -> Dense(32->2) on 8x8x1 images."""
    rng = np.random.default_rng(seed)
    hidden = dense(TOY_SHAPE, 32, rng)
    return Classifier([hidden, relu(hidden.out_shape), dense(hidden.out_shape, 2, rng)])


def build_cifar_model(seed: int, num_classes: int = 10) -> Classifier:
    """Conv(3->16) ReLU Pool Conv(16->32) ReLU Pool Flatten Dense(2048->classes)."""
    rng = np.random.default_rng(seed)
    layers: List[Layer] = [conv3x3(CIFAR_SHAPE, 16, rng)]
    layers.append(relu(layers[-1].out_shape))
    layers.append(maxpool2x2(layers[-1].out_shape))
    layers.append(conv3x3(layers[-1].out_shape, 32, rng))
    layers.append(relu(layers[-1].out_shape))
    layers.append(maxpool2x2(layers[-1].out_shape))
    layers.append(flatten(layers[-1].out_shape))
    layers.append(dense(layers[-1].out_shape, num_classes, rng))
    return Classifier(layers)


def build_model(topology: Topology, seed: int, num_classes: int) -> Classifier:
    if topology == Topology.TOY:
        if num_classes != 2:
            raise InvalidArgumentError("the toy topology is a two-class model")
        return build_toy_model(seed)
    return build_cifar_model(seed, num_classes)


def _infer_topology(dataset: LabeledDataset) -> Topology:
    if dataset.image_shape == TOY_SHAPE:
        return Topology.TOY
    if dataset.image_shape == CIFAR_SHAPE:
        return Topology.CIFAR
    raise ShapeError(f"no reference topology for images of shape {dataset.image_shape}")


def train_classifier(
    data: LabeledDataset, cfg: TrainConfig, topology: Optional[Topology] = None
) -> Classifier:
    """Momentum SGD on mean softmax cross-entropy; deterministic given ``cfg.seed``."""
    if len(data) == 0:
        raise DatasetError("empty dataset")
    topology = topology or _infer_topology(data)
    model = build_model(topology, cfg.seed, data.num_classes)
    rng = np.random.default_rng(cfg.seed + 1)

    velocities = [
        (np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in model.layers
    ]
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = rng.permutation(len(data))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, labels = data.images[idx], data.labels[idx]
            logits, caches = model._forward_cached(images)
            losses, grad_logits = softmax_cross_entropy(logits, labels)
            total_loss += float(losses.sum())
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))

            _, param_grads = model._backward(caches, grad_logits / len(idx))
            for layer, (vel_w, vel_b), (grad_w, grad_b) in zip(model.layers, velocities, param_grads):
                if layer.kind not in _PARAMETRIC:
                    continue
                vel_w *= cfg.momentum
                vel_w -= cfg.learning_rate * grad_w
                vel_b *= cfg.momentum
                vel_b -= cfg.learning_rate * grad_b
                layer.weight += vel_w
                layer.bias += vel_b

        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs} finished",
            extra={
                "loss": total_loss / len(data),
                "train_accuracy": correct / len(data),
                "seconds": time.perf_counter() - started,
            },
        )
    return model
