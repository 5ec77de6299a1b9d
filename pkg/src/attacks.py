"""Universal perturbation attacks.

Every attack ascends one adversarial surrogate: the cross-entropy of
f(x + tau(u)) against the clean prediction of x. Loops stop once their success
measure reaches its threshold or the epoch / inner-iteration caps fire.
"""

import time
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from aws_lambda_powertools import Logger

from classifier import Classifier
from core import ImageTensor, chunk_slices, lp_norm, project_lp
from errors import DatasetError
from estimator import asr_u, chernoff_sample_count, estimate_robustness
from models import (
    AttackConfig,
    AttackName,
    AttackTrace,
    EpochRecord,
    EstimatorConfig,
    InnerLoopRecord,
    NormOrder,
    TransformSample,
    TransformSet,
)
from transforms import TransformStack, sample_transform

logger = Logger(service="robust-uap")


class MinimalPerturbation(NamedTuple):
    delta: ImageTensor
    flipped: bool
    iterations: int


def _require_data(images: np.ndarray) -> None:
    if len(images) == 0:
        raise DatasetError("empty dataset")


def _norm_grad(v: np.ndarray, order: NormOrder) -> np.ndarray:
    """A (sub)gradient of the l_p norm at v."""
    magnitude = np.abs(v)
    if order == NormOrder.L2:
        norm = lp_norm(v, order)
        return v / norm if norm > 0 else np.zeros_like(v)
    peak = magnitude.max()
    if peak == 0:
        return np.zeros_like(v)
    mask = magnitude == peak
    return np.sign(v) * mask / mask.sum()


def _with_penalty(grad: np.ndarray, v: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.lambda_penalty == 0:
        return grad
    return grad - cfg.lambda_penalty * _norm_grad(v, cfg.norm.order)


def _estimator_for(cfg: AttackConfig, rng: np.random.Generator) -> EstimatorConfig:
    return cfg.estimator.model_copy(
        update={"gamma": cfg.gamma, "seed": int(rng.integers(2**31))}
    )


def batch_adversarial_loss(
    model: Classifier,
    images: np.ndarray,
    clean_labels: np.ndarray,
    u: ImageTensor,
    samples: Sequence[TransformSample],
) -> Tuple[float, ImageTensor]:
    """Mean surrogate loss over images x transforms, and its gradient w.r.t. u.

    Every (transform, image) pair is stacked into as few model calls as the
    stack budget allows.
    """
    samples = list(samples)
    n_images = len(images)
    total_loss = 0.0
    grad = np.zeros_like(u)
    for part in chunk_slices(len(samples), n_images * u.size):
        stack = TransformStack(samples[part], *u.shape[1:])
        transformed = stack.apply(u)
        inputs = (images[None] + transformed[:, None]).reshape((-1,) + u.shape)
        losses, grads = model.input_grad_batch(inputs, np.tile(clean_labels, len(stack)))
        total_loss += float(losses.sum())
        per_sample = grads.reshape((len(stack), n_images) + u.shape).sum(axis=1)
        grad = grad + stack.input_grad(per_sample)
    scale = 1.0 / (n_images * len(samples))
    return total_loss * scale, grad * scale


def _neighbours(x: ImageTensor, v: ImageTensor, samples: Sequence[TransformSample]) -> np.ndarray:
    return x[None] + TransformStack(samples, *v.shape[1:]).apply(v)


def minimal_perturbation(
    model: Classifier, x: ImageTensor, u: ImageTensor, cfg: AttackConfig
) -> MinimalPerturbation:
    """DeepFool step: smallest l2 change to ``u`` that flips the prediction of x.

    Non-flipping is a reported outcome (``flipped=False``, best-effort delta
    after ``max_inner_iters`` iterations), not an error.
    """
    label = model.predict(x)
    if model.predict(x + u) != label:
        return MinimalPerturbation(np.zeros_like(x), True, 0)

    overshoot = 1.0 + cfg.overshoot
    r_total = np.zeros_like(x)
    for iteration in range(1, cfg.max_inner_iters + 1):
        logits, jacobian = model.logit_jacobian(x + u + overshoot * r_total)
        best_distance, best_direction = np.inf, None
        for k in range(model.num_classes):
            if k == label:
                continue
            w_k = jacobian[k] - jacobian[label]
            w_norm = lp_norm(w_k, NormOrder.L2)
            if w_norm == 0:
                continue
            distance = abs(logits[k] - logits[label]) / w_norm
            if distance < best_distance:
                best_distance, best_direction = distance, w_k / w_norm
        if best_direction is None:
            # flat logits: no boundary to move towards at this point
            continue

        r_total = r_total + best_distance * best_direction
        if model.predict(x + u + overshoot * r_total) != label:
            return MinimalPerturbation(overshoot * r_total, True, iteration)
    return MinimalPerturbation(overshoot * r_total, False, cfg.max_inner_iters)


def robust_input_perturbation(
    model: Classifier,
    x: ImageTensor,
    tset: TransformSet,
    cfg: AttackConfig,
    rng: np.random.Generator,
    init: Optional[ImageTensor] = None,
    label: Optional[int] = None,
) -> ImageTensor:
    """Sign-PGD on the transform-averaged surrogate for a single input.

    Stops early once every freshly drawn neighbour of the perturbation
    misclassifies x.
    """
    if label is None:
        label = model.predict(x)
    v = np.zeros_like(x) if init is None else init.copy()
    labels = np.array([label])

    for _ in range(cfg.max_inner_iters):
        samples = [sample_transform(tset, rng) for _ in range(cfg.transforms_per_step)]
        if np.all(model.predict_batch(_neighbours(x, v, samples)) != label):
            break
        _, grad = batch_adversarial_loss(model, x[None], labels, v, samples)
        grad = _with_penalty(grad, v, cfg)
        v = project_lp(v + cfg.step_size * np.sign(grad), cfg.norm)
    return v


def _finish(trace: AttackTrace, u: ImageTensor, cfg: AttackConfig, started: float) -> None:
    trace.final_norm = lp_norm(u, cfg.norm.order)
    trace.total_seconds = time.perf_counter() - started
    logger.info(
        f"{trace.algorithm} finished after {len(trace.epochs)} epochs",
        extra={"final_norm": trace.final_norm, "seconds": trace.total_seconds},
    )


def _record_epoch(
    trace: AttackTrace, epoch: int, batches: int, metric: str, estimate: float, threshold: float, epoch_started: float
) -> None:
    record = EpochRecord(
        epoch=epoch,
        batches=batches,
        metric=metric,
        estimate=estimate,
        seconds=time.perf_counter() - epoch_started,
        printed_until_met=estimate < threshold,
    )
    trace.epochs.append(record)
    logger.info(
        f"{trace.algorithm} epoch {epoch}: {metric} = {estimate:.4f}",
        extra={"seconds": record.seconds, "batches": batches},
    )


def standard_uap(model: Classifier, images: np.ndarray, cfg: AttackConfig) -> Tuple[ImageTensor, AttackTrace]:
    """Iterative UAP: accumulate DeepFool steps for every still-correct input.

    Steps that did not flip their input are still added (best effort) before
    projecting.
    """
    _require_data(images)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    clean_labels = model.predict_batch(images)
    u = np.zeros(images.shape[1:])
    trace = AttackTrace(algorithm=AttackName.STANDARD_UAP.value)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_started = time.perf_counter()
        for i in rng.permutation(len(images)):
            x = images[i]
            if model.predict(x + u) != clean_labels[i]:
                continue
            step = minimal_perturbation(model, x, u, cfg)
            u = project_lp(u + step.delta, cfg.norm)
        rate = asr_u(model, images, u, clean_labels)
        _record_epoch(trace, epoch, len(images), "asr_u", rate, cfg.gamma, epoch_started)
        if rate >= cfg.gamma:
            break

    _finish(trace, u, cfg, started)
    return u, trace


def standard_uap_rp(
    model: Classifier, images: np.ndarray, tset: TransformSet, cfg: AttackConfig
) -> Tuple[ImageTensor, AttackTrace]:
    """Iterative UAP whose per-input step is a robust (transform-averaged) PGD."""
    _require_data(images)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    clean_labels = model.predict_batch(images)
    u_r = np.zeros(images.shape[1:])
    trace = AttackTrace(algorithm=AttackName.STANDARD_UAP_RP.value)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_started = time.perf_counter()
        for i in rng.permutation(len(images)):
            x = images[i]
            if model.predict(x + u_r) != clean_labels[i]:
                continue
            v_r = robust_input_perturbation(
                model, x, tset, cfg, rng, init=u_r, label=int(clean_labels[i])
            )
            u_r = project_lp(u_r + (v_r - u_r), cfg.norm)
        robustness = estimate_robustness(
            model, images, tset, u_r, _estimator_for(cfg, rng), cfg.norm, clean_labels
        )
        _record_epoch(trace, epoch, len(images), "robustness", robustness, cfg.zeta, epoch_started)
        if robustness >= cfg.zeta:
            break

    _finish(trace, u_r, cfg, started)
    return u_r, trace


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    return [order[start : start + batch_size] for start in range(0, len(order), batch_size)]


def sgd_uap(
    model: Classifier, images: np.ndarray, tset: TransformSet, cfg: AttackConfig
) -> Tuple[ImageTensor, AttackTrace]:
    """Momentum SGD on the batch surrogate averaged over sampled transforms."""
    _require_data(images)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    clean_labels = model.predict_batch(images)
    u_r = np.zeros(images.shape[1:])
    velocity = np.zeros_like(u_r)
    trace = AttackTrace(algorithm=AttackName.SGD.value)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_started = time.perf_counter()
        batches = _batches(rng.permutation(len(images)), cfg.batch_size)
        for idx in batches:
            samples = [sample_transform(tset, rng) for _ in range(cfg.transforms_per_step)]
            _, grad = batch_adversarial_loss(model, images[idx], clean_labels[idx], u_r, samples)
            grad = _with_penalty(grad, u_r, cfg)
            velocity = cfg.momentum * velocity + cfg.learning_rate * grad
            u_r = project_lp(u_r + velocity, cfg.norm)
        robustness = estimate_robustness(
            model, images, tset, u_r, _estimator_for(cfg, rng), cfg.norm, clean_labels
        )
        _record_epoch(trace, epoch, len(batches), "robustness", robustness, cfg.zeta, epoch_started)
        if robustness >= cfg.zeta:
            break

    _finish(trace, u_r, cfg, started)
    return u_r, trace


def robust_uap(
    model: Classifier, images: np.ndarray, tset: TransformSet, cfg: AttackConfig
) -> Tuple[ImageTensor, AttackTrace]:
    """Batch-wise PGD until each batch is robust, with Chernoff-sized transform pools."""
    _require_data(images)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    n = chernoff_sample_count(cfg.estimator.psi, cfg.estimator.phi)
    clean_labels = model.predict_batch(images)
    u_r = np.zeros(images.shape[1:])
    trace = AttackTrace(algorithm=AttackName.ROBUST_UAP.value)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_started = time.perf_counter()
        batches = _batches(rng.permutation(len(images)), cfg.batch_size)
        for batch_index, idx in enumerate(batches):
            batch, batch_labels = images[idx], clean_labels[idx]
            entry = estimate_robustness(
                model, batch, tset, u_r, _estimator_for(cfg, rng), cfg.norm, batch_labels
            )
            if entry >= cfg.zeta:
                continue

            delta = np.zeros_like(u_r)
            current = entry
            iterations = 0
            while iterations < cfg.max_inner_iters:
                samples = [sample_transform(tset, rng) for _ in range(n)]
                _, grad = batch_adversarial_loss(model, batch, batch_labels, u_r + delta, samples)
                grad = _with_penalty(grad, u_r + delta, cfg)
                delta = project_lp(delta + cfg.step_size * np.sign(grad), cfg.norm)
                iterations += 1
                current = estimate_robustness(
                    model, batch, tset, u_r + delta, _estimator_for(cfg, rng), cfg.norm, batch_labels
                )
                if current >= cfg.zeta:
                    break

            trace.inner_loops.append(
                InnerLoopRecord(
                    epoch=epoch,
                    batch=batch_index,
                    entry_estimate=entry,
                    exit_estimate=current,
                    iterations=iterations,
                    cap_hit=current < cfg.zeta,
                )
            )
            logger.debug(
                f"robust-uap inner loop {epoch}/{batch_index}: {entry:.4f} -> {current:.4f}",
                extra={"iterations": iterations},
            )
            u_r = project_lp(u_r + delta, cfg.norm)

        robustness = estimate_robustness(
            model, images, tset, u_r, _estimator_for(cfg, rng), cfg.norm, clean_labels
        )
        _record_epoch(trace, epoch, len(batches), "robustness", robustness, cfg.zeta, epoch_started)
        if robustness >= cfg.zeta:
            break

    _finish(trace, u_r, cfg, started)
    return u_r, trace


AttackFn = Callable[[Classifier, np.ndarray, TransformSet, AttackConfig], Tuple[ImageTensor, AttackTrace]]

ATTACKS: Dict[AttackName, AttackFn] = {
    AttackName.STANDARD_UAP: lambda model, images, tset, cfg: standard_uap(model, images, cfg),
    AttackName.SGD: sgd_uap,
    AttackName.STANDARD_UAP_RP: standard_uap_rp,
    AttackName.ROBUST_UAP: robust_uap,
}


def run_attack(
    name: AttackName, model: Classifier, images: np.ndarray, tset: TransformSet, cfg: AttackConfig
) -> Tuple[ImageTensor, AttackTrace]:
    return ATTACKS[AttackName(name)](model, images, tset, cfg)
