import pytest
import sys
import os

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from classifier import Classifier, build_toy_model, dense, train_classifier
from datasets import TOY_SHAPE, gen_toy_dataset
from models import TrainConfig


def make_linear_toy_model(scale: float = 1.0) -> Classifier:
    """Single dense layer with logit1 - logit0 = 2 * scale * (sum(left half) - sum(right half)).

    Separates the toy classes exactly.
    """
    pattern = np.ones(TOY_SHAPE)
    pattern[:, :, TOY_SHAPE[2] // 2:] = -1.0
    w = scale * pattern.ravel()
    layer = dense(TOY_SHAPE, 2)
    layer.weight = np.stack([-w, w])
    return Classifier([layer])


@pytest.fixture(scope="session")
def toy_data():
    return gen_toy_dataset(200, seed=1)


@pytest.fixture(scope="session")
def linear_model():
    return make_linear_toy_model()


@pytest.fixture
def make_linear_model():
    return make_linear_toy_model


@pytest.fixture(scope="session")
def class_one_images(toy_data):
    """Images of a single class: one additive perturbation can flip all of them."""
    return toy_data.images[toy_data.labels == 1]


@pytest.fixture(scope="session")
def trained_toy_model():
    data = gen_toy_dataset(200, seed=0)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, epochs=10, batch_size=16, seed=0)
    return data, train_classifier(data, cfg)


@pytest.fixture
def random_toy_model():
    return build_toy_model(seed=3)
