"""Semantic transformations of image tensors.

Geometric transforms (rotation, scale, shear, translation) act on pixel
coordinates about the image center and are resampled with bilinear
interpolation and zero padding. The photometric map ``x' = alpha * x + beta``
is applied afterwards. Composition order is fixed:
rotate -> scale -> shear -> translate -> photometric.
"""

import math
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np

from core import ImageTensor
from errors import ShapeError, SingularTransformError
from models import AugmentedMatrix, TransformSample, TransformSet

_SINGULAR_DET = 1e-9


def _rotation(theta_deg: float) -> np.ndarray:
    theta = math.radians(theta_deg)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _scaling(p: float) -> np.ndarray:
    k = 1.0 + p / 100.0
    return np.array([[k, 0.0, 0.0], [0.0, k, 0.0], [0.0, 0.0, 1.0]])


def _shearing(m: float) -> np.ndarray:
    return np.array([[1.0, m / 100.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def _translation(x: float, y: float) -> np.ndarray:
    return np.array([[1.0, 0.0, x], [0.0, 1.0, y], [0.0, 0.0, 1.0]])


def affine_matrix(sample: TransformSample) -> AugmentedMatrix:
    """Compose rotation, scale and shear, then add the translation bias."""
    m = (
        _translation(sample.tx, sample.ty)
        @ _rotation(sample.theta_deg)
        @ _scaling(sample.scale_p)
        @ _shearing(sample.shear_m)
    )
    matrix = AugmentedMatrix(
        a11=m[0, 0], a12=m[0, 1], a21=m[1, 0], a22=m[1, 1], b1=m[0, 2], b2=m[1, 2]
    )
    if abs(matrix.determinant()) <= _SINGULAR_DET:
        raise SingularTransformError("singular transform")
    return matrix


def _inverse_linear(matrix: AugmentedMatrix) -> np.ndarray:
    a = matrix.linear()
    return np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / matrix.determinant()


@lru_cache(maxsize=16)
def _pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flat row and column coordinates of every pixel, row-major."""
    ii, jj = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    rows, cols = ii.ravel(), jj.ravel()
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def _source_coords(
    height: int, width: int, matrices: Sequence[AugmentedMatrix]
) -> Tuple[np.ndarray, np.ndarray]:
    """Source (x, y) coordinates sampled by every output pixel, one row per matrix."""
    rows, cols = _pixel_grid(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    inv = np.stack([_inverse_linear(m) for m in matrices])
    bias = np.array([[m.b1, m.b2] for m in matrices])

    dx = cols[None, :] - cx - bias[:, 0:1]
    dy = rows[None, :] - cy - bias[:, 1:2]
    sx = inv[:, 0, 0, None] * dx + inv[:, 0, 1, None] * dy + cx
    sy = inv[:, 1, 0, None] * dx + inv[:, 1, 1, None] * dy + cy
    return sx, sy


def _check_image(image: np.ndarray) -> Tuple[int, int, int]:
    if image.ndim != 3:
        raise ShapeError(f"expected a (channels, height, width) tensor, got shape {image.shape}")
    c, h, w = image.shape
    return c, h, w


class TransformStack:
    """Bilinear taps of several samples on one canvas, applied in a single pass.

    Tap arrays are shaped ``(4, samples, pixels)``: for each output pixel the
    four source indices and weights. Out-of-frame taps get weight 0 and a
    clamped (valid) index.
    """

    def __init__(self, samples: Sequence[TransformSample], height: int, width: int):
        if not samples:
            raise ShapeError("a transform stack needs at least one sample")
        self.samples = list(samples)
        self.height = height
        self.width = width
        self.alpha = np.array([s.contrast_alpha for s in self.samples])
        self.beta = np.array([s.brightness_beta for s in self.samples])

        sx, sy = _source_coords(height, width, [affine_matrix(s) for s in self.samples])
        x0 = np.floor(sx)
        y0 = np.floor(sy)
        self.fx = sx - x0
        self.fy = sy - y0

        corner_x = np.stack([x0, x0 + 1.0, x0, x0 + 1.0])
        corner_y = np.stack([y0, y0, y0 + 1.0, y0 + 1.0])
        weights = np.stack(
            [
                (1.0 - self.fx) * (1.0 - self.fy),
                self.fx * (1.0 - self.fy),
                (1.0 - self.fx) * self.fy,
                self.fx * self.fy,
            ]
        )
        self.valid = (corner_x >= 0) & (corner_x < width) & (corner_y >= 0) & (corner_y < height)
        yi = np.clip(corner_y, 0, height - 1).astype(np.int64)
        xi = np.clip(corner_x, 0, width - 1).astype(np.int64)
        self.indices = yi * width + xi
        self.weights = np.where(self.valid, weights, 0.0)

    def __len__(self) -> int:
        return len(self.samples)

    def _check_canvas(self, height: int, width: int) -> None:
        if (height, width) != (self.height, self.width):
            raise ShapeError(
                f"image is {height}x{width}, transform stack was built for {self.height}x{self.width}"
            )

    def apply(self, image: ImageTensor) -> np.ndarray:
        """Every sample applied to ``image``, shaped ``(samples, channels, height, width)``."""
        channels, height, width = _check_image(image)
        self._check_canvas(height, width)
        flat = image.reshape(channels, height * width)

        gathered = flat[:, self.indices]
        out = np.sum(self.weights[None] * gathered, axis=1)
        out = self.alpha[None, :, None] * out + self.beta[None, :, None]
        return out.transpose(1, 0, 2).reshape(len(self), channels, height, width)

    def input_grad(self, upstream: np.ndarray) -> ImageTensor:
        """Pull per-sample gradients w.r.t. the transformed images back to the one source image.

        ``upstream`` is shaped like the output of ``apply``; contributions of all
        samples are summed.
        """
        if upstream.ndim != 4 or upstream.shape[0] != len(self):
            raise ShapeError(
                f"expected upstream of shape ({len(self)}, channels, height, width), got {upstream.shape}"
            )
        _, channels, height, width = upstream.shape
        self._check_canvas(height, width)
        size = height * width

        up = upstream.reshape(len(self), channels, size) * self.alpha[:, None, None]
        idx = self.indices.ravel()
        grad = np.stack(
            [
                np.bincount(idx, weights=(self.weights * up[None, :, c, :]).ravel(), minlength=size)
                for c in range(channels)
            ]
        )
        return grad.reshape(channels, height, width)


def apply_transform(image: ImageTensor, sample: TransformSample) -> ImageTensor:
    _, height, width = _check_image(image)
    return TransformStack([sample], height, width).apply(image)[0]


def transform_input_grad(upstream: ImageTensor, sample: TransformSample) -> ImageTensor:
    """Pull a gradient w.r.t. the transformed image back to the source image."""
    _, height, width = _check_image(upstream)
    return TransformStack([sample], height, width).input_grad(upstream[None])


def coordinate_grad(
    image: ImageTensor, sample: TransformSample, upstream: ImageTensor
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of a loss w.r.t. the sampled source x and y coordinates.

    Returns two ``(height, width)`` arrays. Sub-gradients at integer coordinates
    take the right-hand derivative.
    """
    channels, height, width = _check_image(image)
    if upstream.shape != image.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != image shape {image.shape}")
    taps = TransformStack([sample], height, width)
    flat = image.reshape(channels, height * width)
    up = upstream.reshape(channels, height * width)
    fx, fy = taps.fx[0], taps.fy[0]

    dwdx = (-(1.0 - fy), 1.0 - fy, -fy, fy)
    dwdy = (-(1.0 - fx), -fx, 1.0 - fx, fx)
    gx = np.zeros(height * width)
    gy = np.zeros(height * width)
    for idx, ok, wx, wy in zip(taps.indices[:, 0], taps.valid[:, 0], dwdx, dwdy):
        contrib = np.sum(up * flat[:, idx], axis=0) * ok
        gx += contrib * wx
        gy += contrib * wy
    alpha = sample.contrast_alpha
    return (alpha * gx).reshape(height, width), (alpha * gy).reshape(height, width)


def translation_grad(
    image: ImageTensor, sample: TransformSample, upstream: ImageTensor
) -> Tuple[float, float]:
    """Gradient of a loss w.r.t. the translation parameters (tx, ty)."""
    gx, gy = coordinate_grad(image, sample, upstream)
    inv = _inverse_linear(affine_matrix(sample))
    sx_sum, sy_sum = float(np.sum(gx)), float(np.sum(gy))
    dtx = -(inv[0, 0] * sx_sum + inv[1, 0] * sy_sum)
    dty = -(inv[0, 1] * sx_sum + inv[1, 1] * sy_sum)
    return dtx, dty


def _uniform(rng: np.random.Generator, half_range: float) -> float:
    if half_range == 0:
        return 0.0
    return float(rng.uniform(-half_range, half_range))


def sample_transform(tset: TransformSet, rng: np.random.Generator) -> TransformSample:
    """Draw every parameter independently and uniformly from its range."""
    return TransformSample(
        theta_deg=_uniform(rng, tset.rotation_deg),
        tx=_uniform(rng, tset.translate_x),
        ty=_uniform(rng, tset.translate_y),
        scale_p=_uniform(rng, tset.scale_pct),
        shear_m=_uniform(rng, tset.shear_pct),
        contrast_alpha=1.0 + _uniform(rng, tset.contrast_pct) / 100.0,
        brightness_beta=_uniform(rng, tset.brightness_abs),
    )
