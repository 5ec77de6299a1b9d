"""Monte-Carlo robustness estimation of universal perturbations.

All estimates draw their transformation samples serially from ``cfg.seed``
before evaluating anything, so results depend only on the seed.
"""

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from classifier import Classifier
from core import ImageTensor, chunk_slices, lp_norm
from errors import DatasetError, InvalidArgumentError, ShapeError
from models import EstimatorConfig, NormSpec, RobustnessReport, TransformSample, TransformSet
from transforms import TransformStack, sample_transform

# projected perturbations sit on the sphere; allow the projection's tolerance
NORM_TOLERANCE = 1e-12


def chernoff_sample_count(psi: float, phi: float) -> int:
    """Samples needed so that |p_hat - p| < psi with probability >= 1 - phi."""
    if not (0 < psi < 1 and 0 < phi < 1):
        raise InvalidArgumentError(f"psi and phi must lie in (0, 1), got psi={psi}, phi={phi}")
    return math.ceil(math.log(2.0 / phi) / (2.0 * psi * psi))


def _check_inputs(model: Classifier, images: np.ndarray, u: np.ndarray) -> None:
    if len(images) == 0:
        raise DatasetError("empty dataset")
    if u.shape != images.shape[1:]:
        raise ShapeError(f"perturbation shape {u.shape} does not match images {images.shape[1:]}")


def _flip_count(
    model: Classifier, images: np.ndarray, clean_labels: np.ndarray, u: np.ndarray, clamp: bool = False
) -> int:
    perturbed = images + u[None]
    if clamp:
        perturbed = np.clip(perturbed, 0.0, 1.0)
    return int(np.sum(model.predict_batch(perturbed) != clean_labels))


def asr_u(
    model: Classifier,
    images: np.ndarray,
    u: ImageTensor,
    clean_labels: Optional[np.ndarray] = None,
    clamp: bool = False,
) -> float:
    """Fraction of images whose prediction changes when ``u`` is added.

    Addition is raw unless ``clamp`` is set, which evaluates clip(x + u, 0, 1).
    """
    _check_inputs(model, images, u)
    if clean_labels is None:
        clean_labels = model.predict_batch(images)
    return _flip_count(model, images, clean_labels, u, clamp) / len(images)


def sample_pool(tset: TransformSet, n: int, seed: int) -> List[TransformSample]:
    rng = np.random.default_rng(seed)
    return [sample_transform(tset, rng) for _ in range(n)]


def _evaluate_pool(
    model: Classifier,
    images: np.ndarray,
    clean_labels: np.ndarray,
    pool: Sequence[TransformSample],
    u_r: ImageTensor,
    eps: NormSpec,
) -> List[Tuple[int, bool]]:
    """Per sample: number of flipped images and whether the norm bound holds."""
    pool = list(pool)
    limit = eps.epsilon * (1.0 + NORM_TOLERANCE)
    outcomes = []
    for part in chunk_slices(len(pool), len(images) * u_r.size):
        transformed = TransformStack(pool[part], *u_r.shape[1:]).apply(u_r)
        inputs = (images[None] + transformed[:, None]).reshape((-1,) + u_r.shape)
        predictions = model.predict_batch(inputs).reshape(len(transformed), len(images))
        flips = np.sum(predictions != clean_labels[None], axis=1)
        for neighbour, flip_count in zip(transformed, flips):
            outcomes.append((int(flip_count), lp_norm(neighbour, eps.order) <= limit))
    return outcomes


def estimate_robustness(
    model: Classifier,
    images: np.ndarray,
    tset: TransformSet,
    u_r: ImageTensor,
    cfg: EstimatorConfig,
    eps: NormSpec,
    clean_labels: Optional[np.ndarray] = None,
) -> float:
    """Fraction of sampled neighbours of ``u_r`` that are still UAPs.

    A neighbour counts when its ASR_U strictly exceeds ``cfg.gamma`` and, when
    ``cfg.enforce_norm`` is set, its norm stays within ``eps``.
    """
    _check_inputs(model, images, u_r)
    if clean_labels is None:
        clean_labels = model.predict_batch(images)
    n = chernoff_sample_count(cfg.psi, cfg.phi)
    pool = sample_pool(tset, n, cfg.seed)

    total = len(images)
    hits = 0
    for flips, norm_ok in _evaluate_pool(model, images, clean_labels, pool, u_r, eps):
        if flips / total > cfg.gamma and (norm_ok or not cfg.enforce_norm):
            hits += 1
    return hits / n


def full_report(
    model: Classifier,
    images: np.ndarray,
    tset: TransformSet,
    u_r: ImageTensor,
    gammas: Sequence[float],
    cfg: EstimatorConfig,
    eps: NormSpec,
    clamp_diagnostic: bool = False,
) -> RobustnessReport:
    """ASR_R at every gamma, average ASR_U and norm violations from one sample pool."""
    _check_inputs(model, images, u_r)
    for gamma in gammas:
        if not 0 < gamma < 1:
            raise InvalidArgumentError(f"gamma {gamma} outside (0, 1)")
    clean_labels = model.predict_batch(images)
    n = chernoff_sample_count(cfg.psi, cfg.phi)
    pool = sample_pool(tset, n, cfg.seed)
    outcomes = _evaluate_pool(model, images, clean_labels, pool, u_r, eps)

    total = len(images)
    asr_r_by_gamma = {}
    for gamma in sorted(gammas):
        hits = sum(
            1
            for flips, norm_ok in outcomes
            if flips / total > gamma and (norm_ok or not cfg.enforce_norm)
        )
        asr_r_by_gamma[gamma] = hits / n

    clamped = None
    if clamp_diagnostic:
        clamped = _flip_count(model, images, clean_labels, u_r, clamp=True) / total

    return RobustnessReport(
        n_samples=n,
        asr_u_clean=_flip_count(model, images, clean_labels, u_r) / total,
        asr_r_by_gamma=asr_r_by_gamma,
        avg_asr_u=sum(flips for flips, _ in outcomes) / (n * total),
        norm_violations=sum(1 for _, norm_ok in outcomes if not norm_ok),
        seed=cfg.seed,
        asr_u_clean_clamped=clamped,
    )
