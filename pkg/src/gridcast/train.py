"""Likelihood training with always-on dropout and early stopping.

The evaluation metric tracked during training is the Monte Carlo
predictive negative log-likelihood on the evaluation fold (the mixture
score over `eval_samples` sampled masks), matching how the trained model
is used at prediction time. Training stops once that score has not
improved for `patience` consecutive epochs and returns the weights of the
best epoch.

Everything is deterministic given (seed, config, data): the seed is split
into independent streams for initialisation, shuffling, dropout and the
evaluation masks.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import DatasetSplit, SampleSet
from .errors import DataError, NumericError
from .nn import (
    NetworkSpec,
    WeightSet,
    forward,
    init_weights,
    loss_and_grad,
    sample_mask,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "AdamState",
    "TuneResult",
    "adam_step",
    "train",
    "tune_dropout",
    "mc_eval_nll",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    max_epochs: int = 400
    patience: int = 20
    dropout_rate: float = 0.1
    seed: int = 0
    eval_samples: int = 20
    clip_norm: float = 10.0
    freeze_log_var: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_nll: float
    eval_nll: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best_eval_nll(self) -> float:
        if self.best_epoch < 0:
            return math.inf
        return self.epochs[self.best_epoch].eval_nll

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_nll", "eval_nll", "seconds"])
            for rec in self.epochs:
                writer.writerow([rec.epoch, repr(rec.train_nll), repr(rec.eval_nll),
                                 f"{rec.seconds:.3f}"])
            writer.writerow([])
            writer.writerow(["best_epoch", self.best_epoch])
            writer.writerow(["stop_reason", self.stop_reason])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: WeightSet) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in weights.arrays],
                   v=[np.zeros_like(a) for a in weights.arrays])


def adam_step(weights: WeightSet, grads: WeightSet, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[WeightSet, AdamState]:
    """One adaptive-moment update; pure function of its inputs."""
    t = state.t + 1
    new_w, new_m, new_v = [], [], []
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for w, g, m, v in zip(weights.arrays, grads.arrays, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_w.append(w - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return WeightSet(new_w), AdamState(m=new_m, v=new_v, t=t)


def _clip_gradients(grads: WeightSet, max_norm: float) -> bool:
    """Scale gradients in place to a global norm cap; True if clipping fired."""
    total = 0.0
    for g in grads.arrays:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return False
    scale = max_norm / norm
    for g in grads.arrays:
        g *= scale
    return True


# ---------------------------------------------------------------------------
# Evaluation during training
# ---------------------------------------------------------------------------


def mc_eval_nll(spec: NetworkSpec, weights: WeightSet, samples: SampleSet,
                n_masks: int, rng: np.random.Generator,
                freeze_log_var: bool = False) -> float:
    """Monte Carlo predictive NLL: mean mixture log score over sampled masks."""
    if spec.dropout_rate == 0.0:
        n_masks = 1   # identical masks: the mixture collapses to one component
    y = samples.targets.astype(np.float64)
    log_comps = np.empty((n_masks, len(samples)), dtype=np.float64)
    for s in range(n_masks):
        mask = sample_mask(spec, spec.dropout_rate, rng)
        pred = forward(spec, weights, mask, samples.patches, samples.locations)
        sigma2 = np.full_like(pred.sigma2, 1.0) if freeze_log_var else pred.sigma2
        mu = pred.mu.astype(np.float64)
        log_comps[s] = -0.5 * np.log(2.0 * np.pi * sigma2) - (y - mu) ** 2 / (2.0 * sigma2)
    peak = log_comps.max(axis=0)
    mix = peak + np.log(np.mean(np.exp(log_comps - peak), axis=0))
    return float(-np.mean(mix))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(spec: NetworkSpec, dataset: DatasetSplit, cfg: TrainConfig) -> tuple[WeightSet, TrainLog]:
    """Train with dropout active; return the best-eval-epoch weights.

    Divergence (non-finite loss) aborts the run and returns the last good
    weights with stop_reason "diverged".
    """
    if len(dataset.train) == 0 or len(dataset.eval) == 0:
        raise DataError("training and evaluation folds must be nonempty")
    spec = replace(spec, dropout_rate=cfg.dropout_rate)

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    eval_rng = np.random.default_rng(seeds[3])

    weights = init_weights(spec, init_rng, dtype=np.float32)
    state = AdamState.zeros_like(weights)
    log = TrainLog()
    best_weights = weights.copy()
    best_nll = math.inf
    stall = 0
    n_train = len(dataset.train)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        clipped = 0
        try:
            for start in range(0, n_train, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = dataset.train.subset(idx)
                mask = sample_mask(spec, spec.dropout_rate, dropout_rng)
                loss, grads = loss_and_grad(
                    spec, weights, mask, batch.patches, batch.locations,
                    batch.targets, freeze_log_var=cfg.freeze_log_var,
                )
                if _clip_gradients(grads, cfg.clip_norm):
                    clipped += 1
                weights, state = adam_step(weights, grads, state, cfg.learning_rate)
                epoch_loss += loss * len(idx)
            train_nll = epoch_loss / n_train
            eval_nll = mc_eval_nll(spec, weights, dataset.eval, cfg.eval_samples,
                                   eval_rng, freeze_log_var=cfg.freeze_log_var)
        except NumericError as exc:
            logger.warning("training diverged at epoch %d: %s", epoch, exc)
            log.stop_reason = "diverged"
            break
        seconds = time.perf_counter() - t0
        log.epochs.append(EpochRecord(epoch, train_nll, eval_nll, seconds))
        if clipped:
            logger.info("epoch %d: clipped gradients on %d/%d batches", epoch, clipped,
                        math.ceil(n_train / cfg.batch_size))
        if not (math.isfinite(train_nll) and math.isfinite(eval_nll)):
            log.stop_reason = "diverged"
            break
        if eval_nll < best_nll:
            best_nll = eval_nll
            best_weights = weights.copy()
            log.best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall > cfg.patience:
                log.stop_reason = "patience"
                break
    else:
        log.stop_reason = "max_epochs"

    # best_weights still holds the initial weights if no epoch ever completed
    return best_weights, log


# ---------------------------------------------------------------------------
# Dropout-rate tuning
# ---------------------------------------------------------------------------


@dataclass
class TuneResult:
    best_rate: float
    best_score: float
    best_weights: WeightSet
    best_log: TrainLog
    scores: dict
    errors: dict


def tune_dropout(spec: NetworkSpec, dataset: DatasetSplit, cfg: TrainConfig,
                 rates, train_fn=train) -> TuneResult:
    """Train one model per rate; pick the best eval-fold predictive NLL.

    Ties break toward the smaller rate. A failing rate is recorded and the
    sweep continues; if every rate fails the last error is re-raised.
    """
    rates = list(rates)
    if not rates:
        raise ValueError("rates must be nonempty")
    scores: dict[float, float] = {}
    errors: dict[float, str] = {}
    best = None
    last_exc = None
    for rate in rates:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside [0, 1)")
        try:
            weights, log = train_fn(spec, dataset, replace(cfg, dropout_rate=rate))
            score = log.best_eval_nll
        except (DataError, NumericError, ValueError) as exc:
            logger.warning("rate %.3g failed: %s", rate, exc)
            errors[rate] = str(exc)
            last_exc = exc
            continue
        scores[rate] = score
        logger.info("rate %.3g: eval NLL %.5f", rate, score)
        if best is None or (score, rate) < (best[1], best[0]):
            best = (rate, score, weights, log)
    if best is None:
        raise last_exc
    return TuneResult(
        best_rate=best[0],
        best_score=best[1],
        best_weights=best[2],
        best_log=best[3],
        scores=scores,
        errors=errors,
    )
