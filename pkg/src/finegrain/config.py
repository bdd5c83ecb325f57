"""Experiment configuration.

Loss and pooling hyper-parameters default to the standard settings
(alpha=0.5, lambda=2.0, gamma=16, m=0.75, K=4, tau in {0.3, 0.2}); the
optimizer keeps momentum 0.9, weight decay 1e-3 and a 10x step decay.  Sizes,
epoch counts and the initial learning rate are scaled down so a full run fits
in a few minutes on one CPU core.

``finetune_lr`` defaults to ``None``, which continues at the post-decay rate.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import DatasetSpec
from .embedding import DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_MARGIN
from .model import POOLING_MODES
from .numerics import ConfigurationError
from .pooling import DEFAULT_K

EMBEDDING_LOSSES = ("none", "within", "full")


@dataclass
class ExperimentConfig:
    # model
    pooling: str = "gkmp"
    k: int = DEFAULT_K
    embedding_dim: int = 64
    channels: tuple = (8, 16, 32)
    # embedding loss
    embedding_loss: str = "full"
    lam: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    margin: float = DEFAULT_MARGIN
    alpha: float = DEFAULT_ALPHA
    # epochs trained with lambda = 0 before the embedding loss switches on
    embedding_warmup: int = 8
    embedding_ramp: int = 6
    # optimization
    batch_size: int = 14
    epochs: int = 40
    lr: float = 0.05
    lr_decay: float = 10.0
    decay_epoch: int = 30
    momentum: float = 0.9
    weight_decay: float = 1e-3
    # random resized crops during classifier training (no box labels used)
    zoom_prob: float = 0.5
    zoom_min_scale: float = 0.3
    # weighted-average finetune
    weighted_finetune: bool = True
    finetune_epochs: int = 10
    finetune_lr: float | None = None
    # localization
    localizer: bool = True
    tau: float = 0.3
    loc_input: int = 32
    loc_channels: tuple = (8, 16)
    loc_epochs: int = 30
    loc_lr: float = 0.05
    loc_loss: str = "smooth_l1"
    # reproducibility and data
    seed: int = 0
    data_seed: int = 2024
    test_per_class: int = 20
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        self.channels = tuple(self.channels)
        self.loc_channels = tuple(self.loc_channels)
        self.validate()

    def validate(self):
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(f"pooling must be one of {POOLING_MODES}")
        if self.embedding_loss not in EMBEDDING_LOSSES:
            raise ConfigurationError(f"embedding_loss must be one of {EMBEDDING_LOSSES}")
        if self.weighted_finetune and self.pooling not in ("gkmp", "gkmp_weighted"):
            raise ConfigurationError("weighted-average finetuning needs k-max pooling")
        if min(self.epochs, self.finetune_epochs, self.embedding_warmup, self.embedding_ramp) < 0 or self.batch_size < 1:
            raise ConfigurationError("batch size must be positive and epoch counts non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("tau must lie in (0, 1)")
        self.dataset.validate()
        block = self.dataset.image_size // 2 ** len(self.channels)
        if len(self.loc_channels) != 2:
            raise ConfigurationError("the localizer has exactly two conv stages")
        # two 2x2 poolings in the localizer
        if self.loc_input // 4 != block:
            raise ConfigurationError(
                f"localizer output {self.loc_input // 4} must match the classifier heatmap "
                f"size {block}"
            )

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.embedding_loss == "none" else self.lam

    def lambda_at(self, epoch: int) -> float:
        if epoch < self.embedding_warmup:
            return 0.0
        # linear ramp from 0 to the full weight over embedding_ramp epochs
        frac = (epoch - self.embedding_warmup + 1) / (self.embedding_ramp + 1)
        return self.effective_lambda * min(1.0, frac)

    @property
    def post_decay_lr(self) -> float:
        return self.lr / self.lr_decay

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.post_decay_lr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def flat(self) -> dict:
        """Flattened view (dataset fields prefixed with ``data_``) for tables."""
        d = self.to_dict()
        ds = d.pop("dataset")
        d.update({f"data_{k}": v for k, v in ds.items()})
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
