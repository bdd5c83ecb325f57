"""Numerical core: the differentiable-op contract, finite differences, l2 normalization.

Tensors are plain ``numpy.ndarray`` objects in float64.  Every operation with a
hand-written backward pass derives from :class:`DifferentiableOp` so the same
gradient checker can be pointed at any of them.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# Library-wide gradient check tolerances.
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


class ConfigurationError(ValueError):
    """Invalid hyper-parameter or input configuration."""


class ContractViolation(RuntimeError):
    """An operation was called outside its pre-conditions."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


class DifferentiableOp:
    """Base class for operations with an explicit backward pass.

    ``forward`` stores whatever it needs in ``self._ctx``; ``backward``
    consumes that context exactly once and returns one gradient per input.
    Trainable tensors live in ``params``; ``backward`` fills ``grads`` with
    arrays of matching shapes.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._ctx = None

    def __call__(self, *inputs):
        return self.forward(*inputs)

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, grad_output):
        raise NotImplementedError

    def _take_ctx(self):
        if self._ctx is None:
            raise ContractViolation(
                f"{type(self).__name__}.backward called without a matching forward"
            )
        ctx, self._ctx = self._ctx, None
        return ctx

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def _scalar_of(fn: Callable, inputs: Sequence[np.ndarray]) -> float:
    out = fn(*inputs)
    out = np.asarray(out)
    if out.size != 1:
        raise ContractViolation(
            f"finite differences need a scalar output, got shape {out.shape}"
        )
    return float(out.reshape(()))


def finite_difference_gradient(op, inputs: Sequence[np.ndarray], epsilon: float = 1e-5):
    """Central-difference gradient of a scalar-valued op w.r.t. each input.

    ``op`` is either a :class:`DifferentiableOp` (its ``forward`` is used) or
    any callable taking the inputs positionally.
    """
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    fn = op.forward if isinstance(op, DifferentiableOp) else op
    work = [as_tensor(x).copy() for x in inputs]
    _scalar_of(fn, work)  # validates output shape up front
    grads = []
    for x in work:
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = _scalar_of(fn, work)
            flat[i] = orig - epsilon
            minus = _scalar_of(fn, work)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * epsilon)
        grads.append(g)
    return grads


def finite_difference_param_gradient(loss_fn: Callable[[], float], param: np.ndarray,
                                     epsilon: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. an array mutated in place."""
    g = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        plus = float(loss_fn())
        flat[i] = orig - epsilon
        minus = float(loss_fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * epsilon)
    return g


def gradients_close(analytic, numeric, rtol: float = GRAD_RTOL, atol: float = GRAD_ATOL) -> bool:
    """Element-wise ``|a - n| <= max(atol, rtol * |n|)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.shape != n.shape:
        return False
    return bool(np.all(np.abs(a - n) <= np.maximum(atol, rtol * np.abs(n))))


def max_relative_error(analytic, numeric, atol: float = GRAD_ATOL) -> float:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), atol / GRAD_RTOL)))


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale each slice along ``axis`` to unit norm; zero slices stay zero."""
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    return v / safe


class L2Normalize(DifferentiableOp):
    """Row-wise l2 normalization of an ``(N, E)`` batch."""

    def forward(self, x):
        x = as_tensor(x)
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        safe = np.where(norm > 0.0, norm, 1.0)
        y = x / safe
        self._ctx = (y, safe, norm > 0.0)
        return y

    def backward(self, grad_output):
        y, norm, nonzero = self._take_ctx()
        g = as_tensor(grad_output)
        # d(x/|x|) = (g - y <y, g>) / |x|
        proj = np.sum(y * g, axis=-1, keepdims=True)
        dx = (g - y * proj) / norm
        return (np.where(nonzero, dx, g / norm),)
