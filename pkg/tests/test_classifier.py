import pytest
import sys
import os
import math

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from classifier import (
    Classifier,
    Topology,
    build_cifar_model,
    build_model,
    build_toy_model,
    dense,
    flatten,
    maxpool2x2,
    relu,
    softmax_cross_entropy,
    train_classifier,
)
from datasets import CIFAR_SHAPE, LabeledDataset, TOY_SHAPE
from errors import DatasetError, InvalidArgumentError, NonFiniteError, ShapeError
from models import TrainConfig


class TestConstruction:
    """Test layer chains and reference topologies"""

    def test_toy_model_shapes(self):
        model = build_toy_model(seed=0)

        assert model.input_shape == TOY_SHAPE
        assert model.num_classes == 2

    def test_cifar_model_shapes(self):
        model = build_cifar_model(seed=0)

        assert model.input_shape == CIFAR_SHAPE
        assert model.num_classes == 10
        assert model.forward(np.zeros(CIFAR_SHAPE)).shape == (10,)

    def test_shape_chain_violation(self):
        with pytest.raises(ShapeError, match="shape-chain violation"):
            Classifier([dense(TOY_SHAPE, 4), dense((5,), 2)])

    def test_last_layer_must_be_a_vector(self):
        with pytest.raises(ShapeError, match="shape-chain violation"):
            Classifier([relu(TOY_SHAPE)])

    def test_odd_pooling_input(self):
        with pytest.raises(ShapeError):
            maxpool2x2((1, 7, 8))

    def test_non_finite_parameters(self):
        layer = dense(TOY_SHAPE, 2)
        layer.weight[0, 0] = np.nan

        with pytest.raises(NonFiniteError):
            Classifier([layer])

    def test_toy_topology_is_binary(self):
        with pytest.raises(InvalidArgumentError):
            build_model(Topology.TOY, seed=0, num_classes=3)

    def test_same_seed_same_weights(self):
        a, b = build_toy_model(seed=5), build_toy_model(seed=5)

        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)


class TestInference:
    """Test forward passes and predictions"""

    def test_zero_model_ties_to_class_zero(self):
        model = Classifier([flatten(TOY_SHAPE), dense((64,), 3)])

        assert model.predict(np.ones(TOY_SHAPE)) == 0

    def test_batch_ties_go_to_class_zero(self):
        model = Classifier([flatten(TOY_SHAPE), dense((64,), 3)])

        assert model.predict_batch(np.ones((4,) + TOY_SHAPE)).tolist() == [0, 0, 0, 0]

    def test_batch_matches_single(self, random_toy_model):
        images = np.random.default_rng(0).uniform(size=(5,) + TOY_SHAPE)

        batch = random_toy_model.forward_batch(images)

        for i, x in enumerate(images):
            np.testing.assert_allclose(random_toy_model.forward(x), batch[i], rtol=1e-10, atol=1e-12)

    def test_input_shape_checked(self, random_toy_model):
        with pytest.raises(ShapeError):
            random_toy_model.predict(np.zeros((1, 4, 4)))

    def test_linear_model_separates_toy_data(self, linear_model, toy_data):
        assert linear_model.accuracy(toy_data) == 1.0

    def test_identity_dense(self):
        layer = dense((2,), 2)
        layer.weight = np.eye(2)

        np.testing.assert_array_equal(Classifier([layer]).forward(np.array([0.2, 0.8])), [0.2, 0.8])

    def test_forward_matches_scalar_loops(self):
        rng = np.random.default_rng(8)
        hidden = dense(TOY_SHAPE, 5, rng)
        hidden.bias = rng.normal(size=5)
        head = dense((5,), 3, rng)
        head.bias = rng.normal(size=3)
        model = Classifier([hidden, relu((5,)), head])
        x = rng.uniform(size=TOY_SHAPE)

        pixels = list(x.ravel())
        activations = []
        for j in range(5):
            total = hidden.bias[j]
            for i, value in enumerate(pixels):
                total += hidden.weight[j, i] * value
            activations.append(max(total, 0.0))
        expected = []
        for k in range(3):
            total = head.bias[k]
            for j, value in enumerate(activations):
                total += head.weight[k, j] * value
            expected.append(total)

        np.testing.assert_allclose(model.forward(x), expected, rtol=1e-12, atol=1e-12)


class TestGradients:
    """Test the analytic input gradients"""

    def test_cross_entropy_gradient_rows_sum_to_zero(self):
        logits = np.random.default_rng(1).normal(size=(4, 5))

        losses, grad = softmax_cross_entropy(logits, np.array([0, 1, 2, 3]))

        assert np.all(losses > 0)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_input_grad_matches_central_difference(self, random_toy_model):
        rng = np.random.default_rng(2)
        x = rng.uniform(size=TOY_SHAPE)
        _, grad = random_toy_model.input_grad(x, 1)
        h = 1e-6

        for index in rng.choice(x.size, size=20, replace=False):
            up, down = x.copy(), x.copy()
            up.flat[index] += h
            down.flat[index] -= h
            numeric = (random_toy_model.input_grad(up, 1)[0] - random_toy_model.input_grad(down, 1)[0]) / (2 * h)

            assert grad.flat[index] == pytest.approx(numeric, rel=1e-5, abs=1e-7)

    def test_logit_jacobian_of_linear_model(self, linear_model):
        x = np.random.default_rng(3).uniform(size=TOY_SHAPE)

        logits, jacobian = linear_model.logit_jacobian(x)

        assert jacobian.shape == (2,) + TOY_SHAPE
        np.testing.assert_allclose(jacobian.reshape(2, -1), linear_model.layers[0].weight)
        np.testing.assert_allclose(logits, linear_model.forward(x))

    def test_zero_model_loss_is_log_two(self):
        model = Classifier([dense(TOY_SHAPE, 2)])

        loss, grad = model.input_grad(np.full(TOY_SHAPE, 0.3), 1)

        assert loss == pytest.approx(math.log(2.0), rel=1e-12)
        assert np.all(grad == 0.0)

    def test_larger_scale_raises_misclassified_loss(self, make_linear_model, class_one_images):
        x = class_one_images[0]

        base, _ = make_linear_model(1.0).input_grad(x, 0)
        doubled, _ = make_linear_model(2.0).input_grad(x, 0)

        assert doubled > base

    def test_input_grad_rejects_bad_label(self, random_toy_model):
        with pytest.raises(InvalidArgumentError):
            random_toy_model.input_grad(np.zeros(TOY_SHAPE), 2)


class TestTraining:
    """Test momentum SGD training"""

    def test_learns_toy_task(self, trained_toy_model):
        data, model = trained_toy_model

        assert len(data) == 200
        assert model.accuracy(data) >= 0.95

    def test_deterministic_given_seed(self, toy_data):
        cfg = TrainConfig(epochs=2, seed=4)

        a = train_classifier(toy_data, cfg)
        b = train_classifier(toy_data, cfg)

        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)

    def test_zero_epochs_returns_initial_model(self, toy_data):
        model = train_classifier(toy_data, TrainConfig(epochs=0, seed=5))

        assert np.array_equal(model.layers[0].weight, build_toy_model(seed=5).layers[0].weight)

    def test_empty_dataset(self):
        empty = LabeledDataset(
            images=np.zeros((0,) + TOY_SHAPE), labels=np.zeros(0, dtype=np.int64), name="empty", num_classes=2
        )

        with pytest.raises(DatasetError, match="empty dataset"):
            train_classifier(empty, TrainConfig())
