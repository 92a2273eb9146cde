"""Training loop and the 5-fold cross-validation driver."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attributes import normalize_ratings
from .data.augment import FoldSplit, augment, make_folds
from .data.formats import NoduleSample
from .data.preprocess import compute_dataset_stats, normalize_intensity
from .model import Model, ModelConfig, ValidationError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epsilon: float = 1e-8
    seed: int = 0
    augment: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, Mapping):
            self.model = ModelConfig.from_dict(self.model)
        if int(self.epochs) < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0:
            raise ValidationError(f"lr must be non-negative, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1/beta2 must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")

    @property
    def lam(self) -> float:
        return self.model.lam

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown train config keys: {sorted(extra)}")
        return cls(**dict(d))


@dataclass
class TrainReport:
    epoch_losses: list[float]
    model: Model
    stats: dict
    wall_time: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "stats": self.stats,
            "wall_time": self.wall_time,
            "seed": self.seed,
        }


def prepare_inputs(samples: Sequence[NoduleSample], stats: dict) -> list[np.ndarray]:
    return [normalize_intensity(s.volume.slices, stats) for s in samples]


def train_model(
    samples: Sequence[NoduleSample],
    config: TrainConfig,
    stats: dict | None = None,
    model: Model | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Train with one nodule per step.

    Each epoch shuffles the training order from a seeded stream; augmentation
    draws come from a separate per-epoch stream so they do not perturb the
    shuffle. ``stats`` defaults to the voxel statistics of ``samples``.
    """
    if not samples:
        raise ValidationError("training set is empty")
    t0 = time.perf_counter()
    if stats is None:
        stats = compute_dataset_stats(samples)
    if model is None:
        model = Model.create(config.model, seed=config.seed)
    elif model.config != config.model:
        raise ValidationError("model config does not match train config")
    volumes = prepare_inputs(samples, stats)
    targets = [normalize_ratings(s.ratings) for s in samples]
    trainable = model.trainable()
    opt = ad.OptimizerState(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
        epsilon=config.epsilon,
    )
    shuffle_rng = np.random.default_rng([config.seed, 1])
    losses: list[float] = []
    tape = ad.Tape()
    for epoch in range(int(config.epochs)):
        aug_rng = np.random.default_rng([config.seed, 2, epoch])
        total = 0.0
        for step, i in enumerate(shuffle_rng.permutation(len(samples))):
            vol = volumes[i]
            if config.augment:
                vol, _ = augment(vol, aug_rng)
            tape.reset()
            with tape:
                rec = model.forward(vol)
                loss = model.loss(rec, targets[i])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, step {step} (nodule {samples[i].id})"
                )
            tape.backward(loss)
            ad.adam_step(trainable, opt)
            total += value
        losses.append(total / len(samples))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    return TrainReport(losses, model, stats, time.perf_counter() - t0, config.seed)


@dataclass
class FoldResult:
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    report: TrainReport
    evaluation: object  # EvalReport


@dataclass
class XvalResult:
    folds: list[FoldResult]
    split: FoldSplit

    @property
    def fold_mean_maes(self) -> list[float]:
        return [f.evaluation.mean_mae for f in self.folds]

    @property
    def mean_mae(self) -> float:
        """Mean MAE pooled over every held-out nodule of every fold."""
        errs = np.concatenate([f.evaluation.abs_errors for f in self.folds])
        return float(errs.mean())

    @property
    def per_attribute_mae(self) -> np.ndarray:
        errs = np.concatenate([f.evaluation.abs_errors for f in self.folds])
        return errs.mean(axis=0)

    def best_fold(self) -> int:
        return int(np.argmin(self.fold_mean_maes))


def run_xval(
    samples: Sequence[NoduleSample],
    config: TrainConfig,
    split: FoldSplit | None = None,
    split_seed: int = 0,
    folds: Sequence[int] | None = None,
) -> XvalResult:
    """Train and evaluate one model per fold.

    Pass the same ``split`` (or ``split_seed``) when comparing variants so
    every variant sees identical folds. Fold ``k`` trains with seed
    ``config.seed + k`` on stats from its own training split.
    """
    from .evaluation import evaluate

    if len(samples) < 5:
        raise ValidationError("cross-validation needs at least 5 samples")
    by_id = {s.id: s for s in samples}
    if split is None:
        split = make_folds([s.id for s in samples], split_seed)
    results = []
    for k in folds if folds is not None else range(split.fold_count):
        train_ids, test_ids = split.train_ids(k), split.test_ids(k)
        train_set = [by_id[i] for i in train_ids]
        test_set = [by_id[i] for i in test_ids]
        fold_cfg = TrainConfig(**{**{f.name: getattr(config, f.name) for f in fields(config)}, "seed": config.seed + k})
        report = train_model(train_set, fold_cfg)
        ev = evaluate(report.model, test_set, report.stats)
        results.append(FoldResult(k, train_ids, test_ids, report, ev))
    return XvalResult(results, split)
