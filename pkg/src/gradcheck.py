"""Central finite-difference checks of every analytic gradient."""

from typing import Callable, Dict

import numpy as np
from aws_lambda_powertools import Logger

from attacks import batch_adversarial_loss
from classifier import Classifier, Layer, build_toy_model, conv3x3, dense, flatten, maxpool2x2, relu
from models import TransformSet
from transforms import apply_transform, sample_transform, transform_input_grad, translation_grad

logger = Logger(service="robust-uap")

FD_STEP = 1e-6
COORDINATES = 100
MODEL_TOLERANCE = 1e-5
TRANSFORM_TOLERANCE = 1e-6

TRANSFORM_FAMILIES: Dict[str, TransformSet] = {
    "rotation": TransformSet(rotation_deg=30.0),
    "translation": TransformSet(translate_x=2.5, translate_y=2.5),
    "scale": TransformSet(scale_pct=20.0),
    "shear": TransformSet(shear_pct=20.0),
    "brightness_contrast": TransformSet(contrast_pct=20.0, brightness_abs=0.1),
}


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _max_error(
    loss: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    rng: np.random.Generator,
    count: int = COORDINATES,
) -> float:
    """Compare ``analytic`` with central differences of ``loss`` at random coordinates."""
    worst = 0.0
    for index in rng.choice(point.size, size=min(count, point.size), replace=False):
        bumped = point.copy()
        bumped.flat[index] += FD_STEP
        upper = loss(bumped)
        bumped.flat[index] -= 2.0 * FD_STEP
        lower = loss(bumped)
        numeric = (upper - lower) / (2.0 * FD_STEP)
        worst = max(worst, relative_error(float(analytic.flat[index]), numeric))
    return worst


def _check_layer(layer: Layer, rng: np.random.Generator) -> Dict[str, float]:
    x = rng.normal(size=(2,) + layer.in_shape)
    upstream = rng.normal(size=(2,) + layer.out_shape)

    def loss_of_input(v: np.ndarray) -> float:
        return float(np.sum(layer.forward(v)[0] * upstream))

    _, cache = layer.forward(x)
    grad_in, grad_w, grad_b = layer.backward(upstream, cache)
    name = layer.kind.name.lower()
    errors = {f"layer/{name}/input": _max_error(loss_of_input, x, grad_in, rng)}
    if grad_w is None:
        return errors

    original = layer.weight

    def loss_of_weight(w: np.ndarray) -> float:
        layer.weight = w
        try:
            return loss_of_input(x)
        finally:
            layer.weight = original

    errors[f"layer/{name}/weight"] = _max_error(loss_of_weight, original.copy(), grad_w, rng)
    return errors


def check_layers(rng: np.random.Generator) -> Dict[str, float]:
    """Every layer kind of a small conv net, checked in isolation."""
    layers = [conv3x3((2, 6, 6), 3, rng)]
    layers.append(relu(layers[-1].out_shape))
    layers.append(maxpool2x2(layers[-1].out_shape))
    layers.append(flatten(layers[-1].out_shape))
    layers.append(dense(layers[-1].out_shape, 4, rng))
    layers[-1].bias = rng.normal(size=4)

    errors: Dict[str, float] = {}
    for layer in layers:
        errors.update(_check_layer(layer, rng))

    model = Classifier(layers)
    x = rng.uniform(size=model.input_shape)
    label = int(rng.integers(model.num_classes))
    _, grad = model.input_grad(x, label)
    errors["model/input_grad"] = _max_error(lambda v: model.input_grad(v, label)[0], x, grad, rng)
    return errors


def check_transforms(rng: np.random.Generator) -> Dict[str, float]:
    """Input gradient of sum(tau(u)^2) for one sample of each transformation family."""
    errors = {}
    for family, tset in TRANSFORM_FAMILIES.items():
        sample = sample_transform(tset, rng)
        u = rng.normal(size=(3, 8, 8))
        grad = transform_input_grad(2.0 * apply_transform(u, sample), sample)
        errors[f"transform/{family}"] = _max_error(
            lambda v: float(np.sum(apply_transform(v, sample) ** 2)), u, grad, rng
        )
    return errors


def check_translation_params(rng: np.random.Generator) -> Dict[str, float]:
    """Derivative of sum(r * tau(u)) w.r.t. the translation parameters."""
    u = rng.normal(size=(1, 8, 8))
    upstream = rng.normal(size=u.shape)
    base = sample_transform(TransformSet(rotation_deg=15.0, translate_x=1.5, translate_y=1.5), rng)
    analytic = np.array(translation_grad(u, base, upstream))

    def loss(params: np.ndarray) -> float:
        sample = base.model_copy(update={"tx": float(params[0]), "ty": float(params[1])})
        return float(np.sum(upstream * apply_transform(u, sample)))

    return {"transform/translation_params": _max_error(loss, np.array([base.tx, base.ty]), analytic, rng)}


def check_adversarial_loss(rng: np.random.Generator) -> Dict[str, float]:
    """Gradient of the batch surrogate over images x transforms w.r.t. the perturbation."""
    model = build_toy_model(int(rng.integers(2**31)))
    images = rng.uniform(size=(4,) + model.input_shape)
    labels = model.predict_batch(images)
    tset = TransformSet(rotation_deg=10.0, translate_x=1.0, translate_y=1.0, contrast_pct=5.0, brightness_abs=0.05)
    samples = [sample_transform(tset, rng) for _ in range(3)]
    u = rng.normal(scale=0.1, size=model.input_shape)

    _, grad = batch_adversarial_loss(model, images, labels, u, samples)
    return {
        "attack/batch_adversarial_loss": _max_error(
            lambda v: batch_adversarial_loss(model, images, labels, v, samples)[0], u, grad, rng
        )
    }


def tolerance_for(name: str) -> float:
    return TRANSFORM_TOLERANCE if name.startswith("transform/") else MODEL_TOLERANCE


def run_gradcheck(seed: int) -> Dict[str, float]:
    """Max relative error per gradient suite; every value should sit under ``tolerance_for(name)``."""
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    errors.update(check_layers(rng))
    errors.update(check_transforms(rng))
    errors.update(check_translation_params(rng))
    errors.update(check_adversarial_loss(rng))
    for name, error in errors.items():
        logger.debug(f"gradcheck {name}: {error:.3e}")
    return errors
