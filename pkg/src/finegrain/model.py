"""Desk-scale classification network.

conv stack -> feature block (D, I, J) -> global pooling -> linear embedding
-> l2 normalization -> linear classifier.  The classifier reads the same
normalized embedding the embedding loss sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Linear, MaxPool2d, ReLU, Sequential
from .localization import heatmap_from_features
from .numerics import ConfigurationError, ContractViolation, L2Normalize, as_tensor
from .pooling import GlobalKMaxPool

POOLING_MODES = ("gap", "gmp", "gkmp", "gkmp_weighted")
INPUT_CENTER = 0.5


@dataclass
class ModelOutput:
    logits: np.ndarray
    features: np.ndarray
    block: np.ndarray


class FineGrainedNet:
    def __init__(self, num_classes: int, *, image_size: int = 64, in_channels: int = 3,
                 channels=(8, 16, 32), embedding_dim: int = 64, pooling: str = "gkmp",
                 k: int = 4, seed: int = 0):
        if pooling not in POOLING_MODES:
            raise ConfigurationError(f"pooling must be one of {POOLING_MODES}")
        if image_size % 2 ** len(channels):
            raise ConfigurationError("image size must be divisible by 2**len(channels)")
        rng = np.random.default_rng(seed)
        layers = []
        prev = in_channels
        for c in channels:
            layers += [Conv2d(prev, c, 3, rng), ReLU(), MaxPool2d()]
            prev = c
        self.backbone = Sequential(*layers)
        self.block_size = image_size // 2 ** len(channels)
        self.image_size = image_size
        self.num_classes = num_classes
        spatial = self.block_size ** 2
        self.pooling = pooling
        self.k = {"gap": spatial, "gmp": 1}.get(pooling, k)
        if not 1 <= self.k <= spatial:
            raise ConfigurationError(f"k={self.k} outside [1, {spatial}]")
        self.pool = GlobalKMaxPool(self.k, weighted=pooling == "gkmp_weighted")
        self.embed = Linear(prev, embedding_dim, rng)
        self.normalize = L2Normalize()
        self.classifier = Linear(embedding_dim, num_classes, rng)
        # inputs are unit vectors, so unit-variance weights give O(1) logits at init
        self.classifier.params["weight"] = rng.normal(0.0, 1.0, (num_classes, embedding_dim))
        self.frozen = False

    @property
    def modules(self):
        return {"backbone": self.backbone, "pool": self.pool, "embed": self.embed,
                "classifier": self.classifier}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, m in self.modules.items() for k, v in m.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, m in self.modules.items() for k, v in m.grads.items()}

    def load_params(self, params: dict[str, np.ndarray]):
        for name, m in self.modules.items():
            if isinstance(m, Sequential):
                for key in m.params:
                    idx, pname = key.split(".", 1)
                    m.layers[int(idx)].params[pname] = as_tensor(params[f"{name}.{key}"]).copy()
            else:
                for key in list(m.params):
                    m.params[key] = as_tensor(params[f"{name}.{key}"]).copy()

    def use_weighted_pooling(self):
        if self.pooling not in ("gkmp", "gkmp_weighted"):
            raise ConfigurationError(f"weighted averaging needs k-max pooling, model uses {self.pooling}")
        self.pooling = "gkmp_weighted"
        self.pool.enable_weights()

    def forward(self, images) -> ModelOutput:
        # pixel values lie in [0, 1]; centring them speeds up the first epochs
        block = self.backbone.forward(as_tensor(images) - INPUT_CENTER)
        pooled = self.pool.forward(block)
        features = self.normalize.forward(self.embed.forward(pooled))
        logits = self.classifier.forward(features)
        return ModelOutput(logits, features, block)

    def backward(self, grad_logits, grad_features=None):
        if self.frozen:
            raise ContractViolation("model is frozen")
        (gf,) = self.classifier.backward(grad_logits)
        if grad_features is not None:
            gf = gf + grad_features
        (g,) = self.normalize.backward(gf)
        (g,) = self.embed.backward(g)
        (g,) = self.pool.backward(g)
        self.backbone.backward(g)

    def infer(self, images, batch_size: int = 50) -> ModelOutput:
        """Forward pass without keeping backward caches."""
        images = as_tensor(images)
        outs = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        self._drop_ctx()
        return ModelOutput(*(np.concatenate([getattr(o, f) for o in outs])
                             for f in ("logits", "features", "block")))

    def _drop_ctx(self):
        for layer in self.backbone.layers + [self.pool, self.embed, self.normalize, self.classifier]:
            layer._ctx = None

    def predict(self, images) -> np.ndarray:
        return self.infer(images).logits.argmax(axis=1)

    def heatmaps(self, images) -> np.ndarray:
        return heatmap_from_features(self.infer(images).block)

    def early_convs(self):
        return [layer for layer in self.backbone.layers if isinstance(layer, Conv2d)]

    def freeze(self):
        self.frozen = True
        return self
