"""Procedural fine-grained image benchmark with ground-truth boxes.

Every image shows one striped convex polygon on a cluttered background.  The
class fixes the stripe orientation and the polygon's vertex count; position,
size, rotation, colors and clutter are random.  Neighbouring classes differ by
a small rotation of the stripes, so inter-class variation is small.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .localization import BoundingBox
from .numerics import ConfigurationError


@dataclass
class DatasetSpec:
    num_classes: int = 5
    samples_per_class: int = 40
    image_size: int = 64
    min_object: int = 20
    max_object: int = 40
    angle_span: float = 50.0
    stripe_period: float = 4.0
    period_jitter: float = 0.5
    angle_jitter: float = 4.0
    clutter_blobs: int = 6
    noise: float = 0.08

    def validate(self):
        if self.num_classes < 1 or self.samples_per_class < 0:
            raise ConfigurationError("need at least one class and non-negative sample count")
        if not 2 <= self.min_object <= self.max_object:
            raise ConfigurationError("object size range must satisfy 2 <= min <= max")
        if self.max_object > self.image_size:
            raise ConfigurationError(
                f"objects up to {self.max_object}px do not fit a {self.image_size}px image"
            )


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W)
    label: int
    truth_box: BoundingBox
    mask: np.ndarray | None = field(default=None, repr=False)


def class_attributes(label: int, spec: DatasetSpec):
    """Stripe angle (degrees) and polygon vertex count for a class."""
    return spec.angle_span * label / spec.num_classes, 3 + label % 4


def _polygon_mask(yy, xx, cy, cx, radius, vertices, rotation):
    # convex regular polygon as an intersection of half-planes
    apothem = radius * np.cos(np.pi / vertices)
    mask = np.ones(yy.shape, dtype=bool)
    for v in range(vertices):
        theta = rotation + 2 * np.pi * (v + 0.5) / vertices
        mask &= (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta) <= apothem
    return mask


def _render(rng: np.random.Generator, spec: DatasetSpec, label: int) -> SyntheticSample:
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    img = np.empty((3, S, S))
    img[:] = rng.uniform(0.3, 0.6, size=(3, 1, 1))
    for _ in range(spec.clutter_blobs):
        r = rng.uniform(3, 10)
        cy, cx = rng.uniform(0, S, size=2)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, blob] = (img[:, blob] + rng.uniform(0.0, 1.0, size=(3, 1))) / 2

    angle, vertices = class_attributes(label, spec)
    angle = np.deg2rad(angle + rng.uniform(-spec.angle_jitter, spec.angle_jitter))
    while True:
        size = rng.uniform(spec.min_object, spec.max_object)
        radius = size / 2
        cy, cx = rng.uniform(radius, S - radius, size=2)
        mask = _polygon_mask(yy, xx, cy, cx, radius, vertices, rng.uniform(0, 2 * np.pi))
        if mask.any():
            break
    phase = rng.uniform(0, 2 * np.pi)
    period = spec.stripe_period + rng.uniform(-spec.period_jitter, spec.period_jitter)
    wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    light = rng.uniform(0.75, 1.0, size=(3, 1))
    dark = rng.uniform(0.0, 0.25, size=(3, 1))
    stripes = np.where(wave[mask] > 0, light, dark)
    img[:, mask] = stripes
    img += rng.normal(0.0, spec.noise, size=img.shape)

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
    return SyntheticSample(img, int(label), box, mask)


def generate_dataset(spec: DatasetSpec, seed: int) -> list[SyntheticSample]:
    """Balanced, deterministic sample list (classes interleaved)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    return [
        _render(rng, spec, label)
        for _ in range(spec.samples_per_class)
        for label in range(spec.num_classes)
    ]


def split_seeds(seed: int) -> tuple[int, int]:
    """Independent train/test generator seeds derived from one benchmark seed."""
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def stack(samples):
    """``(images, labels, boxes)`` arrays from a sample list."""
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, 0, 0))
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels, [s.truth_box for s in samples]


def save_dataset(samples, directory) -> Path:
    """One ``.npy`` tensor per sample plus ``index.json`` with labels and boxes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.npy"
        np.save(directory / name, s.image)
        index.append({"file": name, "label": s.label, "box": list(s.truth_box.as_int_tuple())})
    (directory / "index.json").write_text(json.dumps({"samples": index}, indent=1))
    return directory


def load_dataset(directory) -> list[SyntheticSample]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return [
        SyntheticSample(np.load(directory / e["file"]), int(e["label"]), BoundingBox(*e["box"]))
        for e in index["samples"]
    ]


def spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)
