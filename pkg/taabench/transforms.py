"""
Input transforms shared by the semantic-similarity attacks.

All transforms accept a single HWC image or an NHWC batch, return a tensor of
the same shape, and are differentiable in the pixel values.
"""

from typing import List, Optional, Union

import numpy as np

from taabench import tensor_core as tc
from taabench.model_zoo import Model, batched
from taabench.models import DiverseInputParams, SpectrumSaliencyMap, SpectrumTransformParams
from taabench.tensor_core import DctBasis, Tensor, dct_basis

ImageLike = Union[Tensor, np.ndarray]


def _as_batch(x: ImageLike):
    x = tc.as_tensor(x)
    if x.ndim == 3:
        return tc.reshape(x, (1,) + x.shape), x.shape
    return x, None


def _restore(out: Tensor, single_shape) -> Tensor:
    return tc.reshape(out, single_shape) if single_shape is not None else out


def diverse_input(x: ImageLike, params: DiverseInputParams, rng: np.random.Generator) -> Tensor:
    """
    With probability p, nearest-resize to a random size in [low, high] of the
    original and zero-pad back at a random offset; otherwise return x itself.
    """
    x = tc.as_tensor(x)
    if rng.random() >= params.probability:
        return x
    batch, single_shape = _as_batch(x)
    size = batch.shape[1]
    low = max(1, int(round(params.low * size)))
    high = max(low, int(round(params.high * size)))
    side = int(rng.integers(low, high + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    resized = tc.resize_nearest(batch, side, side)
    padded = tc.pad(resized, ((0, 0), (top, size - side - top), (left, size - side - left), (0, 0)))
    return _restore(padded, single_shape)


def scale_copies(x: ImageLike, m: int) -> List[Tensor]:
    """x / 2**i for i = 0..m-1."""
    if m < 1:
        raise ValueError(f"need at least one scale copy, got m={m}")
    x = tc.as_tensor(x)
    return [tc.scale(x, 1.0 / 2 ** i) for i in range(m)]


def spectrum_transform(x: ImageLike, params: SpectrumTransformParams, rng: np.random.Generator,
                       clip: bool = True, basis: Optional[DctBasis] = None) -> Tensor:
    """
    idct2((dct2(x) + dct2(xi)) * M), xi ~ N(0, sigma^2), M ~ U[1 - rho, 1 + rho].

    Every batch row draws its own xi and M. Identity parameters return x itself.
    """
    x = tc.as_tensor(x)
    if params.is_identity:
        return x
    basis = basis or dct_basis(x.shape[-3])
    xi = rng.normal(0.0, params.sigma, size=x.shape)
    mask = rng.uniform(1.0 - params.rho, 1.0 + params.rho, size=x.shape)
    spectrum = tc.add(tc.dct2(x, basis), tc.dct2(Tensor(xi), basis))
    out = tc.idct2(tc.multiply(spectrum, Tensor(mask)), basis)
    return tc.clamp(out, 0.0, 1.0) if clip else out


def spectrum_saliency(model: Model, x: ImageLike, y: int) -> SpectrumSaliencyMap:
    """Gradient of the loss with respect to the DCT coefficients of x."""
    batch, single = batched(model, x)
    basis = dct_basis(batch.shape[1])
    coefficients = tc.dct2(batch.data, basis).data
    labels = np.full(batch.shape[0], y) if np.isscalar(y) else np.asarray(y)

    def objective(spectrum):
        return tc.cross_entropy(model.forward(tc.idct2(spectrum, basis)), labels, reduction="sum")

    _, grad = tc.grad_of(objective, coefficients)
    return SpectrumSaliencyMap(grad[0] if single else grad)
