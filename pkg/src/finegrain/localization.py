"""Heatmap-based localization: box extraction, cropping, distillation, IoU.

Boxes use continuous pixel-edge coordinates with exclusive upper edges: the
box ``(160, 96, 192, 128)`` covers pixel columns 160..191 and rows 96..127,
and its area is ``(x_max - x_min) * (y_max - y_min)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .layers import Conv2d, MaxPool2d, ReLU, Sequential
from .numerics import ConfigurationError, ContractViolation, DifferentiableOp, as_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ConfigurationError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_int_tuple(self):
        return tuple(int(round(v)) for v in self.as_tuple())

    @classmethod
    def full(cls, height: int, width: int) -> "BoundingBox":
        return cls(0, 0, width, height)


@dataclass
class LocalizationConfig:
    tau: float = 0.3
    input_resize: int = 32
    channels: tuple = (8, 16)
    loss: str = "smooth_l1"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if self.loss not in ("smooth_l1", "mse"):
            raise ConfigurationError(f"unknown localization loss {self.loss!r}")


def heatmap_from_features(block) -> np.ndarray:
    """Mean over feature maps: ``(D, I, J) -> (I, J)`` (batched over leading axes)."""
    return as_tensor(block).mean(axis=-3)


def minmax_normalize(h) -> np.ndarray:
    """Affinely map ``h`` onto [0, 1]; constant maps become all zeros."""
    h = as_tensor(h)
    lo, hi = h.min(), h.max()
    if hi <= lo:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def extract_cells(h, tau: float):
    """Tight cell rectangle ``(i0, j0, i1, j1)`` (inclusive) over ``h > tau``, or None."""
    rows = np.flatnonzero((h > tau).any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero((h > tau).any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def extract_bbox(h, cfg: LocalizationConfig, image_size) -> BoundingBox:
    """Smallest rectangle over the cells of ``h`` above ``tau``, in image pixels.

    Each heatmap cell covers a ``(H / I) x (W / J)`` pixel patch.  When no cell
    exceeds the threshold the whole image is returned.
    """
    h = as_tensor(h)
    height, width = (image_size, image_size) if np.isscalar(image_size) else image_size
    cells = extract_cells(h, cfg.tau)
    if cells is None:
        return BoundingBox.full(height, width)
    i0, j0, i1, j1 = cells
    sy, sx = height / h.shape[0], width / h.shape[1]
    return BoundingBox(j0 * sx, i0 * sy, (j1 + 1) * sx, (i1 + 1) * sy)


def crop_and_resize(image, box: BoundingBox, target_size) -> np.ndarray:
    """Bilinearly resample the part of ``(C, H, W)`` under ``box`` to ``target_size``.

    Sampling uses half-pixel centers; sample positions are clamped to the
    pixels inside the box.
    """
    image = as_tensor(image)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    if box.width <= 0 or box.height <= 0:
        raise ConfigurationError(f"degenerate box {box}")
    _, H, W = image.shape
    if box.x_min < 0 or box.y_min < 0 or box.x_max > W or box.y_max > H:
        raise ConfigurationError(f"box {box} outside image {W}x{H}")

    def axis_weights(lo, hi, n_out):
        pos = lo + (np.arange(n_out) + 0.5) * (hi - lo) / n_out - 0.5
        pos = np.clip(pos, lo, max(lo, np.ceil(hi) - 1))
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, int(np.ceil(hi)) - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis_weights(box.y_min, box.y_max, th)
    x0, x1, wx = axis_weights(box.x_min, box.x_max, tw)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def resize(image, target_size) -> np.ndarray:
    _, H, W = np.shape(image)
    return crop_and_resize(image, BoundingBox.full(H, W), target_size)


def smooth_l1_loss(predicted, target) -> float:
    """Mean over cells of ``0.5 r^2`` (|r| < 1) or ``|r| - 0.5``."""
    r = _residual(predicted, target)
    a = np.abs(r)
    return float(np.where(a < 1.0, 0.5 * r * r, a - 0.5).mean())


def smooth_l1_grad(predicted, target) -> np.ndarray:
    r = _residual(predicted, target)
    return np.clip(r, -1.0, 1.0) / r.size


def mse_loss(predicted, target) -> float:
    r = _residual(predicted, target)
    return float(np.mean(r * r))


def mse_grad(predicted, target) -> np.ndarray:
    r = _residual(predicted, target)
    return 2.0 * r / r.size


def _residual(predicted, target):
    p, t = as_tensor(predicted), as_tensor(target)
    if p.shape != t.shape:
        raise ContractViolation(f"shape mismatch {p.shape} vs {t.shape}")
    return p - t


LOSSES = {"smooth_l1": (smooth_l1_loss, smooth_l1_grad), "mse": (mse_loss, mse_grad)}


class SmoothL1Loss(DifferentiableOp):
    def forward(self, predicted, target):
        self._ctx = (as_tensor(predicted), as_tensor(target))
        return smooth_l1_loss(*self._ctx)

    def backward(self, grad_output=1.0):
        p, t = self._take_ctx()
        g = float(grad_output) * smooth_l1_grad(p, t)
        return g, -g


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def localization_accuracy(predicted, truth, threshold: float = 0.5) -> float:
    """Fraction of predicted boxes whose IoU with the truth is at least ``threshold``."""
    if len(predicted) != len(truth):
        raise ContractViolation("prediction and truth lists differ in length")
    if not predicted:
        return 0.0
    return sum(iou(p, t) >= threshold for p, t in zip(predicted, truth)) / len(predicted)


class HeatmapPredictor(DifferentiableOp):
    """Lightweight network mapping a downsampled image to a ``(1, I, J)`` heatmap.

    Two conv/ReLU/pool stages followed by a 1x1 convolution.  The output
    resolution is ``input_resize / 4``.
    """

    def __init__(self, in_channels: int = 3, channels=(8, 16), input_resize: int = 32,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c1, c2 = channels
        self.input_resize = input_resize
        self.net = Sequential(
            Conv2d(in_channels, c1, 3, rng), ReLU(), MaxPool2d(),
            Conv2d(c1, c2, 3, rng), ReLU(), MaxPool2d(),
            Conv2d(c2, 1, 1, rng),
        )

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        pass

    @property
    def grads(self):
        return self.net.grads

    @grads.setter
    def grads(self, value):
        pass

    def prepare(self, images) -> np.ndarray:
        images = as_tensor(images)
        if images.shape[-1] == self.input_resize and images.shape[-2] == self.input_resize:
            return images
        return np.stack([resize(im, self.input_resize) for im in images])

    def forward(self, images):
        return self.net.forward(self.prepare(images))[:, 0]

    def backward(self, grad_output):
        return self.net.backward(as_tensor(grad_output)[:, None])

    def init_from(self, first_convs):
        """Copy early conv weights from a trained classifier where shapes agree."""
        copied = 0
        for mine, theirs in zip((self.net.layers[0], self.net.layers[3]), first_convs):
            if all(mine.params[k].shape == theirs.params[k].shape for k in ("weight", "bias")):
                for k in ("weight", "bias"):
                    mine.params[k] = theirs.params[k].copy()
                copied += 1
        return copied

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        images = as_tensor(images)
        out = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        self._ctx = None
        return np.concatenate(out) if out else np.zeros((0,))


@dataclass
class LocalizerTrainResult:
    predictor: HeatmapPredictor
    losses: list = field(default_factory=list)


def train_localizer(images, frozen_classifier, cfg: LocalizationConfig, *, epochs: int = 20,
                    lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 0.0,
                    batch_size: int = 14, seed: int = 0, targets=None) -> LocalizerTrainResult:
    """Distill the classifier's mean-feature-map heatmaps into a small predictor.

    ``frozen_classifier`` must expose ``frozen`` (True) and
    ``heatmaps(images) -> (N, I, J)``; it may expose ``early_convs()`` for
    weight initialization.  Only the predictor is updated.
    """
    from .training import SGD

    if not getattr(frozen_classifier, "frozen", False):
        raise ContractViolation("the classifier must be frozen before distillation")
    rng = np.random.default_rng(seed)
    images = as_tensor(images)
    if targets is None:
        targets = frozen_classifier.heatmaps(images)
    targets = as_tensor(targets)
    predictor = HeatmapPredictor(images.shape[1], cfg.channels, cfg.input_resize, rng)
    out_size = cfg.input_resize // 4
    if targets.shape[1:] != (out_size, out_size):
        raise ConfigurationError(
            f"predictor output {out_size}x{out_size} does not match heatmaps {targets.shape[1:]}"
        )
    if hasattr(frozen_classifier, "early_convs"):
        predictor.init_from(frozen_classifier.early_convs())
    inputs = predictor.prepare(images)
    loss_fn, grad_fn = LOSSES[cfg.loss]
    opt = SGD(lr=lr, momentum=momentum, weight_decay=weight_decay)
    result = LocalizerTrainResult(predictor)
    for epoch in range(epochs):
        order = rng.permutation(len(inputs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            pred = predictor.forward(inputs[idx])
            total += loss_fn(pred, targets[idx]) * len(idx)
            predictor.backward(grad_fn(pred, targets[idx]))
            opt.step(predictor.params, predictor.grads)
        result.losses.append(total / len(inputs))
        log.debug("localizer epoch %d loss %.6f", epoch, result.losses[-1])
    return result


def predict_boxes(predictor: HeatmapPredictor, images, cfg: LocalizationConfig):
    images = as_tensor(images)
    heat = predictor.predict(images)
    size = images.shape[-2:]
    return [extract_bbox(minmax_normalize(h), cfg, size) for h in heat]
