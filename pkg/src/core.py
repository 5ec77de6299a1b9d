"""Dense image primitives shared by every other module.

An image tensor is a float64 numpy array of shape ``(channels, height, width)``;
its C-order ravel is the channel-major, row-major flat layout used on disk.
"""

from typing import List, Sequence, Union

import numpy as np
import numpy.typing as npt

from errors import InvalidArgumentError, NonFiniteError, ShapeError
from models import NormOrder, NormSpec

ImageTensor = npt.NDArray[np.float64]

# floats per stacked (transform x image) model call
STACK_BUDGET = 2**21


def as_image(data: Union[Sequence[float], np.ndarray], height: int, width: int, channels: int) -> ImageTensor:
    """Build an image tensor from flat channel-major data."""
    if height <= 0 or width <= 0 or channels <= 0:
        raise ShapeError(f"image dimensions must be positive, got {height}x{width}x{channels}")
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size != height * width * channels:
        raise ShapeError(
            f"data length {flat.size} does not match {height}x{width}x{channels}"
        )
    _require_finite(flat)
    return flat.reshape(channels, height, width).copy()


def _require_finite(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite tensor")


def lp_norm(v: np.ndarray, order: NormOrder) -> float:
    _require_finite(v)
    if v.size == 0:
        return 0.0
    flat = v.ravel()
    if order == NormOrder.L2:
        return float(np.sqrt(np.dot(flat, flat)))
    return float(np.max(np.abs(flat)))


def project_lp(v: np.ndarray, spec: NormSpec) -> np.ndarray:
    """Project onto the closed l_p ball of radius ``spec.epsilon``.

    The result always has norm <= epsilon, so projecting twice is a no-op.
    """
    _require_finite(v)
    eps = spec.epsilon
    if spec.order == NormOrder.LINF:
        return np.clip(v, -eps, eps)

    norm = lp_norm(v, NormOrder.L2)
    if norm <= eps:
        return v.copy()
    out = (v * eps) / norm
    # rounding can leave the scaled vector a few ulps outside the ball
    while lp_norm(out, NormOrder.L2) > eps:
        out = np.nextafter(out, 0.0)
    return out


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Row-wise ``argmax_label`` over a ``(rows, classes)`` score matrix."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InvalidArgumentError(f"expected a (rows, classes) score matrix, got shape {arr.shape}")
    _require_finite(arr)
    # np.argmax returns the first maximum, so ties go to the lowest index
    return np.argmax(arr, axis=1)


def argmax_label(scores: Union[Sequence[float], np.ndarray]) -> int:
    """Index of the largest score; ties go to the lowest index."""
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise InvalidArgumentError("empty score vector")
    return int(argmax_labels(arr[None])[0])


def chunk_slices(count: int, item_size: int, budget: int = STACK_BUDGET) -> List[slice]:
    """Split ``count`` items of ``item_size`` floats into runs of at most ``budget`` floats.

    A single item larger than the budget still gets a run of its own.
    """
    step = max(1, budget // max(item_size, 1))
    return [slice(start, min(start + step, count)) for start in range(0, count, step)]
