"""Minibatch SGD with Nesterov momentum over any loss of the zoo.

Noise for the noised losses is redrawn at every loss evaluation; by default a
single (B, L) batch is shared by the samples of one minibatch, and
``per_sample_noise`` draws one batch per sample instead. With ``workers > 1``
the per-sample gradients of a minibatch are computed in shards on a thread
pool and summed; the summation order then depends on the sharding, so bit
equality with the single-threaded run is not guaranteed.
"""
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from services.datasets import LongTailDataset, apply_superclass_noise
from services.errors import InvalidArgumentError, TrainingError
from services.losses import LOSS_NAMES, Loss, make_loss, margin_table_from_max
from services.metrics import SHOT_GROUPS, MetricsReport, evaluate
from services.model import Scorer
from services.rng import spawn_rngs
from services.smoothing import NoiseBatch, SmoothingParams

logger = logging.getLogger(__name__)

SELECTION_METRICS = ("macro_top_k", "top_k")

# Default grids for the imbalanced setting; 1.0 and 2.0 are for bias-free unnormalized scorers.
MAX_MARGIN_GRID = (0.2, 0.3, 0.4, 0.5, 1.0, 2.0)
EPSILON_GRID = (0.01, 0.05, 0.1)
TAU_GRID = (0.1, 1.0)
GAMMA_GRID = (0.5, 1.0, 2.0, 5.0)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    loss: str = "ce"
    K: int = 5
    epsilon: float = 0.1
    B: int = 3
    tau: float = 1.0
    gamma: float = 2.0
    max_margin: float = 0.5
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    lr_drop_epochs: Tuple[int, ...] = (20, 25)
    lr_drop_factor: float = 0.1
    score_scale: float = 1.0
    normalize: bool = False
    bias: bool = True
    hidden: int = 0
    eval_K: int = 5
    selection_metric: str = "macro_top_k"
    per_sample_noise: bool = False
    workers: int = 1
    label_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.loss not in LOSS_NAMES:
            raise InvalidArgumentError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSS_NAMES)}")
        if self.loss == "topk_01":
            raise InvalidArgumentError("topk_01 has no gradient and cannot be trained")
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0):
            raise InvalidArgumentError("lr, batch_size and epochs must be positive")
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise InvalidArgumentError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.selection_metric not in SELECTION_METRICS:
            raise InvalidArgumentError(f"selection_metric must be one of {SELECTION_METRICS}")
        SmoothingParams(epsilon=self.epsilon, K=self.K, B=self.B)
        if self.K < 1 or self.eval_K < 1:
            raise InvalidArgumentError(f"K and eval_K must be >= 1, got {self.K} and {self.eval_K}")
        if self.workers < 1 or self.weight_decay < 0:
            raise InvalidArgumentError("workers must be >= 1 and weight_decay >= 0")
        if not 0.0 <= self.label_noise <= 1.0:
            raise InvalidArgumentError(f"label_noise must lie in [0, 1], got {self.label_noise}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        drops = sum(1 for d in self.lr_drop_epochs if epoch >= d)
        return self.lr * self.lr_drop_factor ** drops


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val: MetricsReport


@dataclasses.dataclass
class TrainResult:
    model: Scorer
    best_epoch: int
    history: List[EpochRecord]

    def __iter__(self):
        yield self.model
        yield self.history


def build_loss(cfg: TrainConfig, train_counts) -> Loss:
    margins = None
    if cfg.loss in ("ldam", "noised_imbalanced"):
        margins = margin_table_from_max(np.maximum(train_counts, 1), cfg.max_margin)
    return make_loss(
        cfg.loss,
        K=cfg.K,
        epsilon=cfg.epsilon,
        B=cfg.B,
        tau=cfg.tau,
        gamma=cfg.gamma,
        margins=margins,
    )


def _draw_noise(loss: Loss, rng: np.random.Generator, n: int, L: int, per_sample: bool) -> Optional[NoiseBatch]:
    if not loss.needs_noise:
        return None
    shape = (n, loss.B, L) if per_sample else (loss.B, L)
    return NoiseBatch.from_array(rng.standard_normal(shape))


def _shard_grads(model: Scorer, loss: Loss, X, y, noise: Optional[NoiseBatch]) -> Tuple[float, Dict[str, np.ndarray]]:
    S, cache = model.forward(X)
    values, G = loss.evaluate_batch(S, y, noise)
    return float(values.sum()), model.backward(cache, G)


def _batch_grads(model, loss, X, y, noise, pool: Optional[ThreadPoolExecutor], workers: int):
    if pool is None or X.shape[0] < 2 * workers:
        return _shard_grads(model, loss, X, y, noise)
    bounds = np.array_split(np.arange(X.shape[0]), workers)
    jobs = []
    for idx in bounds:
        shard_noise = noise
        if noise is not None and noise.samples.ndim == 3:
            shard_noise = NoiseBatch.from_array(noise.samples[idx])
        jobs.append(pool.submit(_shard_grads, model, loss, X[idx], y[idx], shard_noise))
    total, grads = 0.0, None
    for job in jobs:
        value, g = job.result()
        total += value
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total, grads


def train(ds: LongTailDataset, cfg: TrainConfig) -> TrainResult:
    """Trains a scorer and returns the best-on-validation model (earliest epoch on ties).

    Margins and shot groups always come from the clean training counts; label
    noise only changes the labels the loss sees.
    """
    cfg.validate()
    counts = ds.train_counts
    if cfg.label_noise > 0:
        ds = apply_superclass_noise(ds, cfg.label_noise, cfg.seed)
    init_rng, order_rng, noise_rng = spawn_rngs(cfg.seed, 3)
    loss = build_loss(cfg, counts)
    model = Scorer.init(ds.dim, ds.L, init_rng, cfg.hidden, cfg.normalize, cfg.score_scale, fit_bias=cfg.bias)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    n = ds.y_train.shape[0]

    best_model, best_epoch, best_metric = model.copy(), -1, -np.inf
    history: List[EpochRecord] = []
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = order_rng.permutation(n)
            epoch_loss = 0.0
            for batch, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                X, y = ds.X_train[idx], ds.y_train[idx]
                noise = _draw_noise(loss, noise_rng, idx.shape[0], ds.L, cfg.per_sample_noise)
                total, grads = _batch_grads(model, loss, X, y, noise, pool, cfg.workers)
                if not np.isfinite(total):
                    raise TrainingError("non-finite loss", epoch=epoch, batch=batch)
                epoch_loss += total
                for name, param in model.params().items():
                    g = grads[name] / idx.shape[0] + cfg.weight_decay * param
                    v = velocity[name]
                    v *= cfg.momentum
                    v += g
                    param -= lr * (g + cfg.momentum * v)
                    if not np.all(np.isfinite(param)):
                        raise TrainingError(f"non-finite parameter {name}", epoch=epoch, batch=batch)
                logger.debug("epoch %d batch %d loss %.6f", epoch, batch, total / idx.shape[0])

            report = evaluate(model, ds.split("val"), cfg.eval_K, counts)
            metric = report.macro_top_k_accuracy if cfg.selection_metric == "macro_top_k" else report.top_k_accuracy
            history.append(EpochRecord(epoch=epoch, lr=lr, train_loss=epoch_loss / n, val=report))
            if metric > best_metric:
                best_model, best_epoch, best_metric = model.copy(), epoch, metric
            logger.info(
                "epoch %d lr %.4g loss %.5f val %s@%d %.4f",
                epoch, lr, epoch_loss / n, cfg.selection_metric, cfg.eval_K, metric,
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(model=best_model, best_epoch=best_epoch, history=history)


def metrics_history_frame(history: List[EpochRecord]) -> pd.DataFrame:
    rows = []
    for rec in history:
        row = {"epoch": rec.epoch, "split": "val", "lr": rec.lr, "train_loss": rec.train_loss}
        row.update(rec.val.as_row())
        rows.append(row)
    columns = ["epoch", "split", "lr", "train_loss", "top_k_accuracy", "macro_top_k_accuracy"]
    columns += [f"{g}_macro_top_k" for g in SHOT_GROUPS]
    return pd.DataFrame(rows, columns=columns)
