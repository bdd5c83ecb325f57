"""Training stages, evaluation and checkpoints.

The recipe runs in four stages: classifier training under the joint loss,
weighted-average finetuning of the k-max pooling, heatmap distillation into
the localizer, and evaluation of the crop-then-classify pipeline.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import generate_dataset, split_seeds, stack
from .embedding import ClassMeanStore, EmbeddingLossConfig, JointLoss
from .localization import (
    BoundingBox,
    HeatmapPredictor,
    LocalizationConfig,
    crop_and_resize,
    extract_bbox,
    iou,
    localization_accuracy,
    minmax_normalize,
    train_localizer,
)
from .model import FineGrainedNet
from .numerics import ConfigurationError, as_tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "finegrain-ckpt-1"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def sgd_step(params: dict, grads: dict, state: dict, *, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0):
    """Momentum SGD with L2 weight decay added to the gradient.

    ``v <- momentum * v + g + weight_decay * p``; ``p <- p - lr * v``.
    Arrays in ``params`` are updated in place; ``state`` maps names to
    velocities.  Returns ``(params, state)``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        state[name] = v
        p -= lr * v
    return params, state


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        sgd_step(params, grads, self.state, lr=self.lr, momentum=self.momentum,
                 weight_decay=self.weight_decay)


@dataclass
class Benchmark:
    train_images: np.ndarray
    train_labels: np.ndarray
    train_boxes: list
    test_images: np.ndarray
    test_labels: np.ndarray
    test_boxes: list

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Benchmark":
        train_seed, test_seed = split_seeds(cfg.data_seed)
        test_spec = cfg.dataset.__class__(**{**cfg.dataset.__dict__,
                                             "samples_per_class": cfg.test_per_class})
        return cls(*stack(generate_dataset(cfg.dataset, train_seed)),
                   *stack(generate_dataset(test_spec, test_seed)))


@dataclass
class TrainedModel:
    model: FineGrainedNet
    store: ClassMeanStore
    config: ExperimentConfig
    trace: list = field(default_factory=list)
    optimizer_state: dict = field(default_factory=dict)


def build_model(cfg: ExperimentConfig) -> FineGrainedNet:
    return FineGrainedNet(cfg.dataset.num_classes, image_size=cfg.dataset.image_size,
                          channels=cfg.channels, embedding_dim=cfg.embedding_dim,
                          pooling=cfg.pooling, k=cfg.k, seed=cfg.seed)


def _loss_config(cfg: ExperimentConfig) -> EmbeddingLossConfig:
    return EmbeddingLossConfig(lam=cfg.effective_lambda, gamma=cfg.gamma, margin=cfg.margin,
                               use_between=cfg.embedding_loss == "full")


def accuracy(model: FineGrainedNet, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images) == labels))


def training_objective(tm: TrainedModel, images, labels) -> float:
    """Mean joint loss over fixed batches, each scored against the current store."""
    cfg = tm.config
    loss = JointLoss(_loss_config(cfg))
    total = 0.0
    for start in range(0, len(labels), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        out = tm.model.infer(images[sl])
        total += loss.forward(out.logits, out.features, labels[sl], tm.store) * len(labels[sl])
        loss._ctx = None
    return total / len(labels)


def random_zoom(images, rng: np.random.Generator, prob: float, min_scale: float,
                max_aspect: float = 1.15) -> np.ndarray:
    """Replace each image, with probability ``prob``, by a random resized crop.

    The crop side is ``scale * size`` with ``scale ~ U(min_scale, 1)`` and the
    aspect ratio jittered within ``[1 / max_aspect, max_aspect]``.  Uses no
    box annotations.
    """
    images = as_tensor(images)
    if prob <= 0.0:
        return images
    H, W = images.shape[-2:]
    out = images.copy()
    for n in range(len(images)):
        scale, aspect, u, v, hit = rng.uniform(size=5)
        if hit >= prob:
            continue
        side = min_scale + (1.0 - min_scale) * scale
        ratio = max_aspect ** (2.0 * aspect - 1.0)
        h = min(1.0, side * np.sqrt(ratio)) * H
        w = min(1.0, side / np.sqrt(ratio)) * W
        y, x = u * (H - h), v * (W - w)
        out[n] = crop_and_resize(images[n], BoundingBox(x, y, x + w, y + h), (H, W))
    return out


def _run_epochs(tm: TrainedModel, bench: Benchmark, epochs: int, stage: str, lr_fn,
                rng: np.random.Generator, trace_file=None, lambda_fn=None):
    cfg = tm.config
    model = tm.model
    loss = JointLoss(_loss_config(cfg))
    opt = SGD(lr=0.0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    opt.state = tm.optimizer_state
    n = len(bench.train_labels)
    for epoch in range(epochs):
        opt.lr = lr_fn(epoch)
        loss.cfg.lam = cfg.effective_lambda if lambda_fn is None else lambda_fn(epoch)
        order = rng.permutation(n)
        sums = dict(loss=0.0, ce=0.0, within=0.0, between=0.0, correct=0.0)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = bench.train_images[idx], bench.train_labels[idx]
            x = random_zoom(x, rng, cfg.zoom_prob, cfg.zoom_min_scale)
            out = model.forward(x)
            total = loss.forward(out.logits, out.features, y, tm.store)
            if not math.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at {stage} epoch {epoch} step {start // cfg.batch_size}: "
                    f"lr={opt.lr}, terms={loss.embedding.last_terms}"
                )
            lw, lb = loss.embedding.last_terms
            sums["loss"] += total * len(idx)
            sums["ce"] += loss.last_ce * len(idx)
            sums["within"] += lw * len(idx)
            sums["between"] += lb * len(idx)
            sums["correct"] += float(np.sum(out.logits.argmax(axis=1) == y))
            g_logits, g_features = loss.backward(1.0)
            model.backward(g_logits, g_features)
            opt.step(model.params, model.grads)
            tm.store = loss.embedding.updated_store
        row = {"stage": stage, "epoch": len([r for r in tm.trace if r["stage"] == stage]),
               "lr": opt.lr, "lambda": loss.cfg.lam, **{k: v / n for k, v in sums.items() if k != "correct"},
               "train_accuracy": sums["correct"] / n,
               "test_accuracy": accuracy(model, bench.test_images, bench.test_labels)}
        tm.trace.append(row)
        if trace_file is not None:
            trace_file.write(json.dumps(row) + "\n")
            trace_file.flush()
        log.info("%s epoch %d loss %.4f train %.3f test %.3f", stage, row["epoch"], row["loss"],
                 row["train_accuracy"], row["test_accuracy"])


def train_classifier(cfg: ExperimentConfig, bench: Benchmark | None = None,
                     trace_path=None) -> TrainedModel:
    """Stage 1: train the network under cross-entropy plus lambda * embedding loss."""
    bench = bench or Benchmark.from_config(cfg)
    model = build_model(cfg)
    tm = TrainedModel(model, ClassMeanStore.zeros(cfg.dataset.num_classes, cfg.embedding_dim,
                                                  cfg.alpha), cfg)
    tm.trace.append({"stage": "init", "epoch": 0,
                     "train_accuracy": accuracy(model, bench.train_images, bench.train_labels),
                     "test_accuracy": accuracy(model, bench.test_images, bench.test_labels)})
    rng = np.random.default_rng(cfg.seed)
    with _maybe_open(trace_path) as fh:
        if fh is not None:
            fh.write(json.dumps(tm.trace[0]) + "\n")
        _run_epochs(tm, bench, cfg.epochs, "train", cfg.lr_at, rng, fh, cfg.lambda_at)
    return tm


def finetune_weighted_average(tm: TrainedModel, bench: Benchmark | None = None,
                              trace_path=None) -> TrainedModel:
    """Stage 2: switch to rank-weighted k-max pooling (weights start at one) and keep training."""
    cfg = tm.config
    if tm.model.pooling not in ("gkmp", "gkmp_weighted"):
        raise ConfigurationError(f"weighted averaging needs k-max pooling, got {tm.model.pooling}")
    bench = bench or Benchmark.from_config(cfg)
    tm.model.use_weighted_pooling()
    lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.post_decay_lr
    rng = np.random.default_rng([cfg.seed, 1])
    with _maybe_open(trace_path, "a") as fh:
        _run_epochs(tm, bench, cfg.finetune_epochs, "finetune", lambda e: lr, rng, fh)
    return tm


def localization_config(cfg: ExperimentConfig) -> LocalizationConfig:
    return LocalizationConfig(tau=cfg.tau, input_resize=cfg.loc_input,
                              channels=cfg.loc_channels, loss=cfg.loc_loss)


def train_localizer_stage(tm: TrainedModel, bench: Benchmark | None = None):
    """Stage 3: distill the frozen classifier's heatmaps into the lightweight predictor."""
    cfg = tm.config
    bench = bench or Benchmark.from_config(cfg)
    tm.model.freeze()
    return train_localizer(bench.train_images, tm.model, localization_config(cfg),
                           epochs=cfg.loc_epochs, lr=cfg.loc_lr, momentum=cfg.momentum,
                           batch_size=cfg.batch_size, seed=cfg.seed)


def predict_boxes(source, images, cfg: ExperimentConfig, truth=None) -> list[BoundingBox]:
    """Boxes from a predictor, from the classifier's own heatmaps, the truth, or full images.

    ``source`` is a :class:`HeatmapPredictor`, a :class:`FineGrainedNet`,
    ``"truth"`` or ``None`` (full image).
    """
    images = as_tensor(images)
    H, W = images.shape[-2:]
    if source is None:
        return [BoundingBox.full(H, W) for _ in images]
    if isinstance(source, str):
        if source != "truth" or truth is None:
            raise ConfigurationError(f"unknown box source {source!r}")
        return list(truth)
    if isinstance(source, HeatmapPredictor):
        heat = source.predict(images)
    else:
        heat = source.heatmaps(images)
    loc_cfg = localization_config(cfg)
    return [extract_bbox(minmax_normalize(h), loc_cfg, (H, W)) for h in heat]


def evaluate_pipeline(model: FineGrainedNet, localizer, images, labels, truth_boxes,
                      cfg: ExperimentConfig) -> dict:
    """Stage 4: box -> crop -> resize -> classify on every test image."""
    images = as_tensor(images)
    boxes = predict_boxes(localizer, images, cfg, truth_boxes)
    size = images.shape[-2:]
    crops = np.stack([crop_and_resize(im, b, size) for im, b in zip(images, boxes)])
    ious = [iou(b, t) for b, t in zip(boxes, truth_boxes)]
    return {
        "accuracy": accuracy(model, crops, labels),
        "loc_accuracy": localization_accuracy(boxes, truth_boxes),
        "mean_iou": float(np.mean(ious)) if ious else float("nan"),
        "n": int(len(labels)),
        "boxes": [b.as_tuple() for b in boxes],
    }


def save_checkpoint(path, tm: TrainedModel, predictor: HeatmapPredictor | None = None) -> Path:
    """Single ``.npz`` file: parameters, class means, config and a version tag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in tm.model.params.items()}
    arrays["store/means"] = tm.store.means
    meta = {"version": CHECKPOINT_VERSION, "config": tm.config.to_dict(),
            "pooling": tm.model.pooling, "alpha": tm.store.alpha,
            "iteration": tm.store.iteration, "trace": tm.trace,
            "has_localizer": predictor is not None}
    if predictor is not None:
        arrays.update({f"loc/{k}": v for k, v in predictor.params.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(TrainedModel, HeatmapPredictor | None)``."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')!r}")
        arrays = {k: z[k] for k in z.files if k != "meta"}
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg)
    if meta["pooling"] == "gkmp_weighted":
        model.use_weighted_pooling()
    model.load_params({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    store = ClassMeanStore(arrays["store/means"], meta["alpha"], meta["iteration"])
    tm = TrainedModel(model, store, cfg, meta["trace"])
    predictor = None
    if meta["has_localizer"]:
        predictor = HeatmapPredictor(3, cfg.loc_channels, cfg.loc_input)
        for key in predictor.params:
            idx, pname = key.split(".", 1)
            predictor.net.layers[int(idx)].params[pname] = arrays[f"loc/{key}"].copy()
    return tm, predictor


class _maybe_open:
    def __init__(self, path, mode="w"):
        self.path, self.mode, self.fh = path, mode, None

    def __enter__(self):
        if self.path is not None:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(self.path, self.mode)
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not None:
            self.fh.close()


def write_eval_csv(path, summary: dict):
    """One row per box source with the headline metrics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["boxes", "accuracy", "loc_accuracy", "mean_iou", "n",
                         "classifier_accuracy", "seed"])
        for name, m in summary["eval"].items():
            writer.writerow([name, m["accuracy"], m["loc_accuracy"], m["mean_iou"], m["n"],
                             summary["classifier_accuracy"], summary["config"]["seed"]])


def run_recipe(cfg: ExperimentConfig, outdir=None, bench: Benchmark | None = None) -> dict:
    """All four stages; returns a summary dict (also written to ``outdir`` if given)."""
    t0 = time.perf_counter()
    bench = bench or Benchmark.from_config(cfg)
    outdir = Path(outdir) if outdir is not None else None
    trace_path = outdir / "metrics.jsonl" if outdir else None
    tm = train_classifier(cfg, bench, trace_path)
    summary = {"config": cfg.flat()}
    if cfg.weighted_finetune and cfg.finetune_epochs >= 0:
        summary["objective_before_finetune"] = training_objective(tm, bench.train_images,
                                                                  bench.train_labels)
        finetune_weighted_average(tm, bench, trace_path)
        summary["objective_after_finetune"] = training_objective(tm, bench.train_images,
                                                                 bench.train_labels)
        summary["pool_weights"] = tm.model.pool.params["w"].tolist()
    summary["classifier_accuracy"] = accuracy(tm.model, bench.test_images, bench.test_labels)
    predictor = None
    if cfg.localizer:
        loc = train_localizer_stage(tm, bench)
        predictor = loc.predictor
        summary["localizer_losses"] = loc.losses
    rows = {"full_image": None, "classifier_heatmap": tm.model, "truth": "truth"}
    if predictor is not None:
        rows["localizer"] = predictor
    summary["eval"] = {}
    for name, src in rows.items():
        m = evaluate_pipeline(tm.model, src, bench.test_images, bench.test_labels,
                              bench.test_boxes, cfg)
        m.pop("boxes")
        summary["eval"][name] = m
    summary["seconds"] = time.perf_counter() - t0
    if outdir is not None:
        save_checkpoint(outdir / "checkpoint.npz", tm, predictor)
        (outdir / "summary.json").write_text(json.dumps(summary, indent=1))
        write_eval_csv(outdir / "summary.csv", summary)
    return {"summary": summary, "model": tm, "predictor": predictor}
