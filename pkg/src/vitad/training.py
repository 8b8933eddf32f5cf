"""Training and evaluation loops.

The encoder stays frozen: its ops never hit the tape because none of its
inputs require gradients, so a training step only pays for fuser and
decoder backward work. Optimization is decoupled-weight-decay Adam over
the trainable tensors in sorted name order, which together with the
seeded per-epoch permutation makes runs bit-reproducible.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetIndex, NormalizeStats, load_image, load_mask
from .meta_ad import ViTAD
from .metrics import (
    MetricReport,
    UndefinedMetric,
    auroc,
    average_precision,
    aupro,
    f1_max,
    mean_report,
)
from .scoring import LOSS_KINDS, ScoreConfig, score_image, training_loss
from .tensor import Tape, Tensor

SCHEDULES = ("step", "cosine")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run cannot continue."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 100
    lr_drop_epoch: int = 80
    schedule: str = "step"
    seed: int = 0
    eval_points: int = 10
    augment: bool = False
    loss_kind: str = "cosine_flat"
    constrained_stages: tuple[int, ...] = (1, 2, 3)
    normalize_mean: tuple[float, float, float] = NormalizeStats().mean
    normalize_std: tuple[float, float, float] = NormalizeStats().std

    def validate(self) -> None:
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0,1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")
        if self.lr_drop_epoch < 0:
            raise ValueError(f"lr_drop_epoch must be >= 0, got {self.lr_drop_epoch}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}, want one of {SCHEDULES}")
        if not 1 <= self.eval_points <= self.epochs:
            raise ValueError("eval_points must lie in [1, epochs]")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}, want one of {LOSS_KINDS}")
        NormalizeStats(self.normalize_mean, self.normalize_std).validate()

    def stats(self) -> NormalizeStats:
        return NormalizeStats(tuple(self.normalize_mean), tuple(self.normalize_std))


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate used for the given zero-based epoch."""
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr * 0.1


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping.

    Tensors are visited in sorted name order so state updates are
    reproducible regardless of dict construction order.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self) -> None:
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name in sorted(self.params):
            t = self.params[name]
            g = t.grad
            if g is None:
                continue
            if self.weight_decay:
                t.data -= (self.lr * self.weight_decay) * t.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            t.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def clear_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def evaluation_epochs(epochs: int, points: int) -> list[int]:
    """Evenly spaced one-based epochs at which to evaluate; always ends at `epochs`."""
    marks = {max(1, round((k + 1) * epochs / points)) for k in range(points)}
    marks.add(epochs)
    return sorted(marks)


@dataclass
class ClassEval:
    scores: np.ndarray
    labels: np.ndarray
    maps: list[np.ndarray]
    masks: list[np.ndarray]


def _gather_class(model: ViTAD, index: DatasetIndex, cls: str,
                  stats: NormalizeStats, score_cfg: ScoreConfig,
                  workers: int = 0) -> ClassEval:
    recs = index.test_records(cls)
    size = model.vit_cfg.image_size

    def run(rec):
        img = load_image(rec.image_path, size, stats)
        enc, dec = model.forward(img)
        return score_image(enc, dec, size, score_cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, recs))
    else:
        results = [run(r) for r in recs]

    scores = np.array([r.image_score for r in results], np.float64)
    labels = np.array([1 if rec.label == "anomaly" else 0 for rec in recs])
    maps = [r.pixel_map for r in results]
    masks = [
        load_mask(rec.mask_path, size)
        if rec.mask_path is not None
        else np.zeros((size, size), bool)
        for rec in recs
    ]
    return ClassEval(scores, labels, maps, masks)


def _soft(metric, *args):
    """None instead of a raised UndefinedMetric, with a warning."""
    try:
        return metric(*args)
    except UndefinedMetric as exc:
        warnings.warn(f"{metric.__name__} undefined: {exc}")
        return None


def metrics_from(ev: ClassEval) -> MetricReport:
    """All seven metrics for one class; degenerate splits yield absent fields."""
    flat_scores = np.concatenate([m.ravel() for m in ev.maps])
    flat_labels = np.concatenate([m.ravel().astype(np.int8) for m in ev.masks])
    return MetricReport(
        image_auroc=_soft(auroc, ev.scores, ev.labels),
        image_ap=_soft(average_precision, ev.scores, ev.labels),
        image_f1max=_soft(f1_max, ev.scores, ev.labels),
        pixel_auroc=_soft(auroc, flat_scores, flat_labels),
        pixel_ap=_soft(average_precision, flat_scores, flat_labels),
        pixel_f1max=_soft(f1_max, flat_scores, flat_labels),
        pixel_aupro=_soft(aupro, ev.maps, ev.masks),
    )


def evaluate_class(model: ViTAD, index: DatasetIndex, cls: str,
                   stats: NormalizeStats | None = None,
                   score_cfg: ScoreConfig | None = None,
                   workers: int = 0) -> MetricReport:
    stats = stats or NormalizeStats()
    score_cfg = score_cfg or ScoreConfig()
    return metrics_from(_gather_class(model, index, cls, stats, score_cfg, workers))


def evaluate(model: ViTAD, index: DatasetIndex,
             stats: NormalizeStats | None = None,
             score_cfg: ScoreConfig | None = None,
             workers: int = 0) -> tuple[MetricReport, dict[str, MetricReport]]:
    """Per-class metric reports plus their mean across classes."""
    per_class = {
        cls: evaluate_class(model, index, cls, stats, score_cfg, workers)
        for cls in index.classes
    }
    return mean_report(list(per_class.values())), per_class


@dataclass
class EvalPoint:
    epoch: int
    mean: MetricReport
    per_class: dict[str, MetricReport]


@dataclass
class TrainResult:
    loss_trace: list[float]
    lr_trace: list[float]
    history: list[EvalPoint] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")
    best_state: dict[str, np.ndarray] | None = None
    seconds: float = 0.0


def _augment_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal and vertical flips, drawn per sample."""
    out = batch.copy()
    hflip = rng.random(len(batch)) < 0.5
    vflip = rng.random(len(batch)) < 0.5
    out[hflip] = out[hflip][:, :, :, ::-1]
    out[vflip] = out[vflip][:, :, ::-1, :]
    return out


def train(model: ViTAD, index: DatasetIndex, cfg: TrainConfig | None = None,
          score_cfg: ScoreConfig | None = None, workers: int = 0,
          log=None) -> TrainResult:
    """Fit fuser and decoder on the pooled normal training stream.

    Evaluates at evenly spaced epochs and tracks the model state with the
    best mean pixel-level AUROC; that snapshot lands in the result while
    the live model keeps its final weights.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    stats = cfg.stats()
    size = model.vit_cfg.image_size
    train_recs = index.train_records()
    if not train_recs:
        raise ValueError("training split is empty")
    images = np.stack([load_image(r.image_path, size, stats) for r in train_recs])

    params = model.trainable_tensors()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    marks = evaluation_epochs(cfg.epochs, cfg.eval_points)
    result = TrainResult(loss_trace=[], lr_trace=[])
    best = (-np.inf, 0)
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg, epoch)
        result.lr_trace.append(opt.lr)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch)))
        order = rng.permutation(len(images))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = images[order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = _augment_batch(batch, rng)
            opt.clear_grads()
            with Tape() as tape:
                enc, dec = model.forward(batch)
                loss = training_loss(enc, dec, cfg.constrained_stages, cfg.loss_kind)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {start // cfg.batch_size}"
                )
            tape.backward(loss)
            opt.step()
            batch_losses.append(value)
        result.loss_trace.append(float(np.mean(batch_losses)))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {result.loss_trace[-1]:.6f} "
                f"lr {opt.lr:g}")

        if (epoch + 1) in marks:
            mean, per_class = evaluate(model, index, stats, score_cfg, workers)
            result.history.append(EvalPoint(epoch + 1, mean, per_class))
            key = mean.pixel_auroc if mean.pixel_auroc is not None else -np.inf
            if key > best[0]:
                best = (key, epoch + 1)
                result.best_state = {
                    name: t.data.copy() for name, t in params.items()
                }
            if log:
                log(f"eval @ {epoch + 1}: mean pixel auroc {key:.4f} mad {mean.mad:.4f}")

    result.best_metric, result.best_epoch = best
    if result.best_state is None:
        warnings.warn("no evaluation produced a usable pixel AUROC; keeping final state")
    result.seconds = time.perf_counter() - started
    return result
