"""Training and evaluation harness.

The loop draws class-balanced batches from an endless weighted sampler,
accumulates per-instance tape gradients into a mean-batch gradient, and
applies AdamW with decoupled weight decay.  Validation average precision
drives both the plateau learning-rate decay (halve after any epoch without
improvement) and early stopping (after ``patience`` stagnant epochs); the
returned parameters are the ones from the best validation epoch.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .data import (Dataset, DatasetMeta, SwitchSchedule, build_schedule,
                   compute_meta, standardize, weighted_sampler)
from .model import (ModelConfig, Rollout, SlanParams, forward, forward_loss,
                    init_params, positive_probability)


@dataclass
class TrainConfig:
    epochs: int = 20
    patience: int = 5
    lr: float = 5e-4
    lr_decay: float = 0.5
    batch_size: int = 16
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    improvement_eps: float = 1e-6
    seed: int = 2024
    workers: int = 1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0 when set, got {self.clip_norm}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    A step whose gradients contain any non-finite entry is skipped whole
    (no moment update, no time increment) and counted.
    """

    def __init__(self, params: Iterable[ad.Parameter], cfg: TrainConfig) -> None:
        self.params = list(params)
        self.lr = cfg.lr
        self.beta1, self.beta2 = cfg.beta1, cfg.beta2
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.t = 0
        self.skipped = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> bool:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                self.skipped += 1
                return False
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
        return True


def clip_gradients(params: Sequence[ad.Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


@dataclass
class PreparedInstance:
    id: str
    schedule: SwitchSchedule
    label: int
    statics: np.ndarray | None


def prepare_dataset(dataset: Dataset) -> list[PreparedInstance]:
    """Precompute schedules once; instances are immutable afterwards."""
    return [PreparedInstance(inst.id, build_schedule(inst, dataset.sensor_count),
                             inst.label, inst.statics)
            for inst in dataset.instances]


@dataclass
class EvalReport:
    auroc: float
    auprc: float
    scores: np.ndarray
    labels: np.ndarray
    ids: list[str]


def evaluate_prepared(params: SlanParams,
                      prepared: Sequence[PreparedInstance]) -> EvalReport:
    scores = np.empty(len(prepared))
    labels = np.empty(len(prepared), dtype=np.int64)
    for i, inst in enumerate(prepared):
        roll = forward(params, inst.schedule, inst.statics)
        scores[i] = positive_probability(roll.logit_values())
        labels[i] = inst.label
    return EvalReport(metrics.auroc(scores, labels), metrics.auprc(scores, labels),
                      scores, labels, [inst.id for inst in prepared])


def evaluate(params: SlanParams, dataset: Dataset,
             meta: DatasetMeta | None = None) -> EvalReport:
    """Score a raw dataset; pass ``meta`` to standardize with another
    split's statistics first (the usual case for val/test)."""
    if meta is not None:
        dataset = standardize(dataset, meta)
    return evaluate_prepared(params, prepare_dataset(dataset))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auprc: float
    val_auroc: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    params: SlanParams
    meta: DatasetMeta
    trace: list[EpochStats]
    best_epoch: int
    best_val_auprc: float
    epochs_run: int
    skipped_steps: int
    stopped_early: bool


def _instance_grads(params: SlanParams, inst: PreparedInstance,
                    epoch: int) -> tuple[dict[str, np.ndarray], float]:
    try:
        _, loss = forward_loss(params, inst.schedule, inst.label, inst.statics)
        loss.tape.backward(loss)
    except ad.AutodiffError as exc:
        raise RuntimeError(
            f"diverged at epoch {epoch} on instance {inst.id!r}: {exc}") from exc
    grads = {p.name: g for p, g in loss.tape.param_grads()}
    return grads, float(loss.value[0])


def _shard_grads(params: SlanParams, shard: Sequence[PreparedInstance],
                 epoch: int) -> tuple[dict[str, np.ndarray], float]:
    acc: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    for inst in shard:
        grads, loss = _instance_grads(params, inst, epoch)
        loss_sum += loss
        for name, g in grads.items():
            if name in acc:
                acc[name] = acc[name] + g
            else:
                acc[name] = g
    return acc, loss_sum


def train(train_ds: Dataset, val_ds: Dataset, model_cfg: ModelConfig,
          train_cfg: TrainConfig, apply_standardize: bool = True) -> TrainResult:
    """Fit on ``train_ds``, steer by average precision on ``val_ds``.

    Both splits are standardized with the training split's statistics.  An
    epoch runs ceil(n/batch) steps over the endless class-balanced sampler;
    gradients are the mean of per-instance losses.  With ``workers > 1``
    batch shards run on threads and are reduced in fixed shard order, so a
    given worker count is exactly reproducible.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not len(train_ds) or not len(val_ds):
        raise ValueError(f"train/val splits must be nonempty, "
                         f"got {len(train_ds)}/{len(val_ds)}")

    meta = compute_meta(train_ds)
    if apply_standardize:
        train_ds = standardize(train_ds, meta)
        val_ds = standardize(val_ds, meta)
    train_prep = prepare_dataset(train_ds)
    val_prep = prepare_dataset(val_ds)

    params = init_params(model_cfg)
    opt = AdamW(params.parameters(), train_cfg)
    sampler = weighted_sampler(train_ds.labels(), train_cfg.seed)
    steps_per_epoch = math.ceil(len(train_prep) / train_cfg.batch_size)
    param_list = list(params.parameters())

    pool = (ThreadPoolExecutor(max_workers=train_cfg.workers)
            if train_cfg.workers > 1 else None)

    trace: list[EpochStats] = []
    best_auprc = -math.inf
    best_epoch = 0
    best_params = params.copy()
    stagnant = 0
    stopped_early = False
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            started = time.perf_counter()
            loss_total = 0.0
            seen = 0
            for _ in range(steps_per_epoch):
                batch = [train_prep[next(sampler)]
                         for _ in range(train_cfg.batch_size)]
                params.zero_grads()
                if pool is None:
                    acc, loss_sum = _shard_grads(params, batch, epoch)
                else:
                    k = train_cfg.workers
                    size = math.ceil(len(batch) / k)
                    shards = [batch[i:i + size] for i in range(0, len(batch), size)]
                    futures = [pool.submit(_shard_grads, params, sh, epoch)
                               for sh in shards]
                    acc, loss_sum = {}, 0.0
                    for fut in futures:          # fixed shard order
                        sh_acc, sh_loss = fut.result()
                        loss_sum += sh_loss
                        for name, g in sh_acc.items():
                            if name in acc:
                                acc[name] = acc[name] + g
                            else:
                                acc[name] = g
                scale = 1.0 / len(batch)
                for p in param_list:
                    g = acc.get(p.name)
                    if g is not None:
                        p.grad += g * scale
                if train_cfg.clip_norm is not None:
                    clip_gradients(param_list, train_cfg.clip_norm)
                opt.step()
                loss_total += loss_sum
                seen += len(batch)

            report = evaluate_prepared(params, val_prep)
            trace.append(EpochStats(epoch, loss_total / seen, report.auprc,
                                    report.auroc, opt.lr,
                                    time.perf_counter() - started))
            if report.auprc > best_auprc + train_cfg.improvement_eps:
                best_auprc = report.auprc
                best_epoch = epoch
                best_params = params.copy()
                stagnant = 0
            else:
                stagnant += 1
                opt.lr *= train_cfg.lr_decay
                if stagnant >= train_cfg.patience:
                    stopped_early = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    return TrainResult(best_params, meta, trace, best_epoch, best_auprc,
                       len(trace), opt.skipped, stopped_early)
