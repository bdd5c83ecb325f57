"""Small convolutional building blocks with hand-written backward passes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import DifferentiableOp, as_tensor


class Conv2d(DifferentiableOp):
    """Stride-1 'same' convolution on ``(N, C, H, W)`` inputs (odd kernel sizes)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel_size = kernel_size
        self.pad = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                           (out_channels, in_channels, kernel_size, kernel_size))
        self.params["bias"] = np.zeros(out_channels)

    def forward(self, x):
        x = as_tensor(x)
        N, C, H, W = x.shape
        k, p = self.kernel_size, self.pad
        if k == 1:
            cols = x.transpose(0, 2, 3, 1).reshape(-1, C)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * k * k)
        wmat = self.params["weight"].reshape(len(self.params["bias"]), -1)
        out = cols @ wmat.T + self.params["bias"]
        self._ctx = (x.shape, cols)
        return np.ascontiguousarray(out.reshape(N, H, W, -1).transpose(0, 3, 1, 2))

    def backward(self, grad_output):
        (N, C, H, W), cols = self._take_ctx()
        k, p = self.kernel_size, self.pad
        w = self.params["weight"]
        g = as_tensor(grad_output).transpose(0, 2, 3, 1).reshape(N * H * W, -1)
        self.grads["weight"] = (g.T @ cols).reshape(w.shape)
        self.grads["bias"] = g.sum(axis=0)
        dcols = (g @ w.reshape(w.shape[0], -1)).reshape(N, H, W, C, k, k)
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (dxp[:, :, p:p + H, p:p + W],)


class ReLU(DifferentiableOp):
    def forward(self, x):
        x = as_tensor(x)
        mask = x > 0
        self._ctx = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_output):
        return (np.where(self._take_ctx(), grad_output, 0.0),)


class MaxPool2d(DifferentiableOp):
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first position."""

    def forward(self, x):
        x = as_tensor(x)
        N, C, H, W = x.shape
        blocks = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(N, C, H // 2, W // 2, 4)
        arg = blocks.argmax(axis=-1)
        self._ctx = (x.shape, arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad_output):
        (N, C, H, W), arg = self._take_ctx()
        g = np.zeros((N, C, H // 2, W // 2, 4))
        np.put_along_axis(g, arg[..., None], as_tensor(grad_output)[..., None], axis=-1)
        g = g.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (g.reshape(N, C, H, W),)


class Linear(DifferentiableOp):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.params["weight"] = rng.uniform(-bound, bound, (out_features, in_features))
        self.params["bias"] = np.zeros(out_features)

    def forward(self, x):
        x = as_tensor(x)
        self._ctx = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_output):
        x = self._take_ctx()
        g = as_tensor(grad_output)
        self.grads["weight"] = g.T @ x
        self.grads["bias"] = g.sum(axis=0)
        return (g @ self.params["weight"],)


class Sequential(DifferentiableOp):
    """Chain of ops; parameters are exposed as ``"<index>.<name>"``."""

    def __init__(self, *layers: DifferentiableOp):
        super().__init__()
        self.layers = list(layers)

    @property
    def params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    @params.setter
    def params(self, value):
        # base-class __init__ assigns an empty dict
        pass

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    @grads.setter
    def grads(self, value):
        pass

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_output):
        g = grad_output
        for layer in reversed(self.layers):
            (g,) = layer.backward(g)
        return (g,)
