"""Global k-max pooling and its weighted-average extension.

A feature block of shape ``(D, I, J)`` (or a batch ``(N, D, I, J)``) is
reduced to one value per feature map: the mean of its ``k`` largest
activations, optionally weighted per rank.  ``k=1`` is global max pooling and
``k=I*J`` is global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigurationError, DifferentiableOp, as_tensor

DEFAULT_K = 4


@dataclass
class PoolConfig:
    k: int = DEFAULT_K
    weights: np.ndarray | None = None

    def validate(self, spatial: int, require_weights: bool = False):
        if not 1 <= self.k <= spatial:
            raise ConfigurationError(f"k={self.k} outside [1, {spatial}]")
        if self.weights is None:
            if require_weights:
                raise ConfigurationError("weighted pooling needs a weight vector")
        elif np.shape(self.weights) != (self.k,):
            raise ConfigurationError(
                f"weights must have length k={self.k}, got shape {np.shape(self.weights)}"
            )


@dataclass
class SortedActivations:
    """Per feature map, the top activations in descending order and where they sit.

    ``values[..., r]`` is the r-th largest value of the map; ``indices`` holds
    the flattened spatial index realizing it.  Ties are ordered by spatial
    index ascending.
    """

    values: np.ndarray
    indices: np.ndarray


def sort_activations(block: np.ndarray, k: int | None = None) -> SortedActivations:
    block = as_tensor(block)
    flat = block.reshape(block.shape[:-2] + (-1,))
    # stable sort on the negated values: descending value, ascending index on ties
    order = np.argsort(-flat, axis=-1, kind="stable")
    if k is not None:
        order = order[..., :k]
    return SortedActivations(np.take_along_axis(flat, order, axis=-1), order)


def _pool(top: np.ndarray, k: int, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return top.sum(axis=-1) / k
    return (top * weights).sum(axis=-1) / k


def gkmp_forward(block, cfg: PoolConfig):
    """Pool ``(..., D, I, J)`` to ``(..., D)``; returns ``(output, cache)``."""
    block = as_tensor(block)
    if block.ndim < 3:
        raise ConfigurationError("feature block needs shape (D, I, J)")
    spatial = block.shape[-1] * block.shape[-2]
    cfg.validate(spatial)
    top = sort_activations(block, cfg.k)
    out = _pool(top.values, cfg.k, None if cfg.weights is None else as_tensor(cfg.weights))
    return out, (block.shape, top, cfg.k, cfg.weights)


def gkmp_weighted_forward(block, cfg: PoolConfig):
    block = as_tensor(block)
    cfg.validate(block.shape[-1] * block.shape[-2], require_weights=True)
    return gkmp_forward(block, cfg)


def gkmp_backward(cache, output_grad):
    """Gradients w.r.t. the block and (for the weighted variant) the weights.

    Returns ``(grad_block, grad_weights)``; ``grad_weights`` is ``None`` for
    plain pooling.
    """
    shape, top, k, weights = cache
    g = as_tensor(output_grad)[..., None]
    per_rank = g / k if weights is None else g * as_tensor(weights) / k
    grad = np.zeros(shape[:-2] + (shape[-2] * shape[-1],), dtype=per_rank.dtype)
    np.put_along_axis(grad, top.indices, per_rank, axis=-1)
    grad_w = None
    if weights is not None:
        grad_w = (g * top.values).reshape(-1, k).sum(axis=0) / k
    return grad.reshape(shape), grad_w


class GlobalKMaxPool(DifferentiableOp):
    """Batched pooling layer ``(N, D, I, J) -> (N, D)``.

    With ``weighted=True`` the rank weights are a trainable parameter ``w``,
    initialized to ones so the weighted layer starts out identical to the
    plain one.
    """

    def __init__(self, k: int = DEFAULT_K, weighted: bool = False):
        super().__init__()
        self.k = int(k)
        self.weighted = weighted
        if weighted:
            self.params["w"] = np.ones(self.k)

    def enable_weights(self):
        if not self.weighted:
            self.weighted = True
            self.params["w"] = np.ones(self.k)

    def forward(self, x):
        cfg = PoolConfig(self.k, self.params["w"] if self.weighted else None)
        out, self._ctx = gkmp_forward(x, cfg)
        return out

    def backward(self, grad_output):
        dx, dw = gkmp_backward(self._take_ctx(), grad_output)
        if self.weighted:
            self.grads["w"] = dw
        return (dx,)
