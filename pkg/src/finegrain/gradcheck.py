"""Finite-difference checks of every analytic backward pass in the package.

Each suite draws a random problem from a seeded generator and returns pairs of
(analytic, numeric) gradients.  ``run_gradcheck`` runs every suite over a set
of seeds and reports the worst relative error per suite.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from .embedding import (
    ClassMeanStore,
    EmbeddingBatch,
    EmbeddingLossConfig,
    JointLoss,
    between_class_loss,
    cross_entropy,
    embedding_loss_backward,
    joint_loss,
    pair_set,
    update_means,
    within_class_loss,
)
from .layers import Conv2d, Linear
from .localization import SmoothL1Loss, smooth_l1_loss
from .numerics import (
    L2Normalize,
    finite_difference_gradient,
    finite_difference_param_gradient,
    gradients_close,
    l2_normalize,
    max_relative_error,
)
from .pooling import PoolConfig, gkmp_backward, gkmp_forward


@dataclass
class SuiteResult:
    name: str
    seeds: int
    checks: int
    max_error: float
    passed: bool
    seconds: float


def _pooled(block, k, weights, proj):
    return float(np.sum(gkmp_forward(block, PoolConfig(k, weights))[0] * proj))


def _pool_problem(rng):
    d, i, j = (int(v) for v in rng.integers(1, 6, size=3))
    k = int(rng.integers(1, i * j + 1))
    return rng.normal(size=(d, i, j)), k, rng.normal(size=k), rng.normal(size=d)


def suite_gkmp_input(rng):
    y, k, _, proj = _pool_problem(rng)
    _, cache = gkmp_forward(y, PoolConfig(k))
    g, _ = gkmp_backward(cache, proj)
    (num,) = finite_difference_gradient(lambda v: _pooled(v, k, None, proj), [y])
    return [(g, num)]


def suite_gkmp_weighted(rng):
    y, k, w, proj = _pool_problem(rng)
    _, cache = gkmp_forward(y, PoolConfig(k, w))
    g, gw = gkmp_backward(cache, proj)
    num_y, num_w = finite_difference_gradient(lambda v, ww: _pooled(v, k, ww, proj), [y, w])
    return [(g, num_y), (gw, num_w)]


def _embedding_problem(rng, margin=2.0):
    c, e = int(rng.integers(2, 5)), int(rng.integers(2, 9))
    n = int(rng.integers(c, 9))
    labels = rng.integers(0, c, size=n)
    labels[:c] = np.arange(c)
    batch = EmbeddingBatch(l2_normalize(rng.normal(size=(n, e))), labels)
    store = ClassMeanStore(0.3 * rng.normal(size=(c, e)), 0.5)
    return batch, store, EmbeddingLossConfig(margin=margin)


def _embedding_terms(features, labels, store, cfg, within=True, between=True):
    batch = EmbeddingBatch(features, labels)
    st = update_means(store, batch)
    out = within_class_loss(batch, st) if within else 0.0
    if between:
        out += between_class_loss(st, pair_set(labels), cfg)
    return out


def suite_within(rng):
    batch, store, cfg = _embedding_problem(rng)
    st = update_means(store, batch)
    g = embedding_loss_backward(batch, store, st, pair_set(batch.labels), cfg, use_between=False)
    (num,) = finite_difference_gradient(
        lambda f: _embedding_terms(f, batch.labels, store, cfg, between=False), [batch.features])
    return [(g, num)]


def suite_between(rng):
    batch, store, cfg = _embedding_problem(rng)
    st = update_means(store, batch)
    pairs = pair_set(batch.labels)
    g = (embedding_loss_backward(batch, store, st, pairs, cfg)
         - embedding_loss_backward(batch, store, st, pairs, cfg, use_between=False))
    (num,) = finite_difference_gradient(
        lambda f: _embedding_terms(f, batch.labels, store, cfg, within=False), [batch.features])
    return [(g, num)]


def suite_embedding_composed(rng):
    batch, store, cfg = _embedding_problem(rng)
    st = update_means(store, batch)
    g = embedding_loss_backward(batch, store, st, pair_set(batch.labels), cfg)
    (num,) = finite_difference_gradient(
        lambda f: _embedding_terms(f, batch.labels, store, cfg), [batch.features])
    return [(g, num)]


def suite_joint(rng):
    batch, store, cfg = _embedding_problem(rng, margin=1.5)
    logits = rng.normal(size=(len(batch.labels), store.num_classes))
    op = JointLoss(cfg)
    op.forward(logits, batch.features, batch.labels, store)
    gl, gf = op.backward()

    def fn(lg, f):
        return joint_loss(cross_entropy(lg, batch.labels),
                          _embedding_terms(f, batch.labels, store, cfg), cfg.lam)

    num_l, num_f = finite_difference_gradient(fn, [logits, batch.features])
    return [(gl, num_l), (gf, num_f)]


def suite_smooth_l1(rng):
    shape = tuple(int(v) for v in rng.integers(1, 7, size=2))
    p, t = 2.0 * rng.normal(size=shape), rng.normal(size=shape)
    op = SmoothL1Loss()
    op.forward(p, t)
    gp, gt = op.backward()
    num_p, num_t = finite_difference_gradient(smooth_l1_loss, [p, t])
    return [(gp, num_p), (gt, num_t)]


def suite_l2_normalize(rng):
    x = rng.normal(size=(3, int(rng.integers(2, 7))))
    proj = rng.normal(size=x.shape)
    op = L2Normalize()
    op.forward(x)
    (g,) = op.backward(proj)
    (num,) = finite_difference_gradient(lambda v: float(np.sum(l2_normalize(v) * proj)), [x])
    return [(g, num)]


def _layer_pairs(layer, x, rng):
    out = layer.forward(x)
    proj = rng.normal(size=out.shape)
    (gx,) = layer.backward(proj)

    def loss(v=x):
        val = float(np.sum(layer.forward(v) * proj))
        layer._ctx = None
        return val

    pairs = [(gx, finite_difference_gradient(loss, [x])[0])]
    for name, p in layer.params.items():
        pairs.append((layer.grads[name], finite_difference_param_gradient(loss, p)))
    return pairs


def suite_conv(rng):
    layer = Conv2d(2, 3, 3, rng)
    return _layer_pairs(layer, rng.normal(size=(2, 2, 5, 4)), rng)


def suite_linear(rng):
    layer = Linear(4, 3, rng)
    return _layer_pairs(layer, rng.normal(size=(5, 4)), rng)


SUITES = {
    "gkmp_input": suite_gkmp_input,
    "gkmp_weighted": suite_gkmp_weighted,
    "within_class": suite_within,
    "between_class": suite_between,
    "embedding_composed": suite_embedding_composed,
    "joint_loss": suite_joint,
    "smooth_l1": suite_smooth_l1,
    "l2_normalize": suite_l2_normalize,
    "conv2d": suite_conv,
    "linear": suite_linear,
}


def run_suite(name: str, seeds=range(10)) -> SuiteResult:
    fn = SUITES[name]
    t0 = time.perf_counter()
    worst, passed, checks = 0.0, True, 0
    for seed in seeds:
        for analytic, numeric in fn(np.random.default_rng([seed, zlib.crc32(name.encode())])):
            worst = max(worst, max_relative_error(analytic, numeric))
            passed &= gradients_close(analytic, numeric)
            checks += 1
    return SuiteResult(name, len(list(seeds)), checks, worst, bool(passed),
                       time.perf_counter() - t0)


def run_gradcheck(seeds=range(10), names=None) -> list[SuiteResult]:
    return [run_suite(n, seeds) for n in (names or SUITES)]
