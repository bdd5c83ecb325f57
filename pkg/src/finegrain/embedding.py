"""Class-mean embedding loss.

Each training step first moves the mean of every class present in the batch
toward that class's batch features, then scores the batch against the moved
means:

* within-class term: half the mean squared distance of each feature to its
  class mean;
* between-class term: a squared hinge on the squared distance of every pair
  of class means present in the batch.

Because the updated means are functions of the batch features, the gradient
w.r.t. a feature has a direct part and a part flowing through its class mean.
The means of the previous step are treated as constants.

Class labels are 0-based.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .numerics import ConfigurationError, ContractViolation, DifferentiableOp, as_tensor

DEFAULT_ALPHA = 0.5
DEFAULT_LAMBDA = 2.0
DEFAULT_GAMMA = 16.0
DEFAULT_MARGIN = 0.75


@dataclass
class EmbeddingLossConfig:
    lam: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    margin: float = DEFAULT_MARGIN
    use_between: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or self.margin < 0:
            raise ConfigurationError("lambda, gamma and margin must be non-negative")


@dataclass
class EmbeddingBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ConfigurationError("features must be a non-empty (N, E) array")
        if self.labels.shape != (len(self.features),):
            raise ConfigurationError("need one label per feature row")

    def check_normalized(self, tol: float = 1e-9):
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ContractViolation("embedding features must be l2-normalized")


@dataclass
class ClassMeanStore:
    """Running class means (C, E), their learning rate and the step counter."""

    means: np.ndarray
    alpha: float = DEFAULT_ALPHA
    iteration: int = 0

    def __post_init__(self):
        self.means = as_tensor(self.means)
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")

    @classmethod
    def zeros(cls, num_classes: int, dim: int, alpha: float = DEFAULT_ALPHA) -> "ClassMeanStore":
        return cls(np.zeros((num_classes, dim)), alpha, 0)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    def copy(self) -> "ClassMeanStore":
        return replace(self, means=self.means.copy())


def pair_set(labels) -> list[tuple[int, int]]:
    """All unordered pairs of distinct classes occurring in ``labels``."""
    present = np.unique(np.asarray(labels, dtype=np.int64))
    return [(int(a), int(b)) for a, b in itertools.combinations(present, 2)]


def _check_labels(labels: np.ndarray, num_classes: int):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigurationError(f"labels must lie in [0, {num_classes})")


def mean_update_rates(labels, num_classes: int, alpha: float) -> np.ndarray:
    """Per class, d(mu_c^t)/d(f_n) for a sample of class c: alpha / (1 + n_c)."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    return alpha / (1.0 + counts)


def update_means(store: ClassMeanStore, batch: EmbeddingBatch) -> ClassMeanStore:
    """One online step of the class means; returns a new store."""
    labels = batch.labels
    _check_labels(labels, store.num_classes)
    C = store.num_classes
    counts = np.bincount(labels, minlength=C).astype(float)
    sums = np.zeros_like(store.means)
    np.add.at(sums, labels, batch.features)
    delta = (counts[:, None] * store.means - sums) / (1.0 + counts[:, None])
    return ClassMeanStore(store.means - store.alpha * delta, store.alpha, store.iteration + 1)


def within_class_loss(batch: EmbeddingBatch, store: ClassMeanStore) -> float:
    """``1/(2N) * sum ||f_n - mu_{c_n}||^2`` against already updated means."""
    diff = batch.features - store.means[batch.labels]
    return float(np.sum(diff * diff) / (2.0 * len(diff)))


def between_class_loss(store: ClassMeanStore, pairs, cfg: EmbeddingLossConfig) -> float:
    if not pairs:
        return 0.0
    idx = np.asarray(pairs, dtype=np.int64)
    diff = store.means[idx[:, 0]] - store.means[idx[:, 1]]
    hinge = np.maximum(cfg.margin - np.sum(diff * diff, axis=1), 0.0)
    return float(cfg.gamma / (4.0 * len(pairs)) * np.sum(hinge * hinge))


def _mean_gradients(batch, store_t, pairs, cfg, use_between):
    """dL/d(mu_c^t) for both loss terms, shape (C, E) each."""
    N = len(batch.features)
    diff = batch.features - store_t.means[batch.labels]
    g_within = np.zeros_like(store_t.means)
    np.add.at(g_within, batch.labels, -diff / N)
    g_between = np.zeros_like(store_t.means)
    if use_between and pairs:
        idx = np.asarray(pairs, dtype=np.int64)
        d = store_t.means[idx[:, 0]] - store_t.means[idx[:, 1]]
        hinge = np.maximum(cfg.margin - np.sum(d * d, axis=1), 0.0)
        # d/d(mu_k) of gamma/(4|P|) * hinge^2 = -gamma/|P| * hinge * (mu_k - mu_c)
        coef = (-cfg.gamma / len(pairs) * hinge)[:, None] * d
        np.add.at(g_between, idx[:, 0], coef)
        np.add.at(g_between, idx[:, 1], -coef)
    return diff / N, g_within, g_between


def embedding_loss_backward(batch: EmbeddingBatch, store_prev: ClassMeanStore,
                            store_t: ClassMeanStore, pairs, cfg: EmbeddingLossConfig,
                            use_between: bool = True) -> np.ndarray:
    """``d(L_w + L_b)/d f_n`` including the path through the updated means.

    ``store_t`` must be ``update_means(store_prev, batch)``.
    """
    if store_t.iteration != store_prev.iteration + 1 or store_t.means.shape != store_prev.means.shape:
        raise ContractViolation("store_t is not the update of store_prev")
    direct, g_w, g_b = _mean_gradients(batch, store_t, pairs, cfg, use_between)
    rates = mean_update_rates(batch.labels, store_prev.num_classes, store_prev.alpha)
    through_means = (g_w + g_b)[batch.labels] * rates[batch.labels][:, None]
    return direct + through_means


class EmbeddingLoss(DifferentiableOp):
    """``L_w + L_b`` as a function of the batch features.

    ``forward`` does not mutate ``store``; the updated store is left in
    ``self.updated_store`` for the caller to commit once the step is done.
    """

    def __init__(self, cfg: EmbeddingLossConfig | None = None):
        super().__init__()
        self.cfg = cfg or EmbeddingLossConfig()
        self.updated_store: ClassMeanStore | None = None
        self.last_terms: tuple[float, float] = (0.0, 0.0)

    def forward(self, features, labels, store: ClassMeanStore) -> float:
        batch = EmbeddingBatch(features, labels)
        store_t = update_means(store, batch)
        pairs = pair_set(batch.labels) if self.cfg.use_between else []
        lw = within_class_loss(batch, store_t)
        lb = between_class_loss(store_t, pairs, self.cfg)
        self.updated_store = store_t
        self.last_terms = (lw, lb)
        self._ctx = (batch, store, store_t, pairs)
        return lw + lb

    def backward(self, grad_output=1.0):
        batch, store, store_t, pairs = self._take_ctx()
        g = embedding_loss_backward(batch, store, store_t, pairs, self.cfg, self.cfg.use_between)
        return (float(grad_output) * g,)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_backward(logits, labels) -> np.ndarray:
    p = softmax(as_tensor(logits))
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def joint_loss(ce: float, embedding_terms: float, lam: float) -> float:
    """``L = L_CE + lambda * L_e``."""
    return ce + lam * embedding_terms


class JointLoss(DifferentiableOp):
    """Cross-entropy on the logits plus ``lambda`` times the embedding loss.

    Inputs are ``(logits, features)``; labels and the mean store are bound at
    forward time.  With ``cfg.lam == 0`` the embedding terms are still
    reported but contribute nothing.
    """

    def __init__(self, cfg: EmbeddingLossConfig | None = None):
        super().__init__()
        self.cfg = cfg or EmbeddingLossConfig()
        self.embedding = EmbeddingLoss(self.cfg)
        self.last_ce = 0.0

    def forward(self, logits, features, labels, store: ClassMeanStore) -> float:
        ce = cross_entropy(logits, labels)
        self.last_ce = ce
        le = self.embedding.forward(features, labels, store)
        self._ctx = (as_tensor(logits), np.asarray(labels, dtype=np.int64))
        return joint_loss(ce, le, self.cfg.lam)

    def backward(self, grad_output=1.0):
        logits, labels = self._take_ctx()
        (gf,) = self.embedding.backward(self.cfg.lam * float(grad_output))
        return float(grad_output) * cross_entropy_backward(logits, labels), gf
