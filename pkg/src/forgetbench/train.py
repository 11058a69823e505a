"""The learning algorithm: class-weighted mini-batch SGD from a fresh init."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np

from forgetbench import nn_core
from forgetbench.data import Dataset, class_weights
from forgetbench.nn_core import Architecture, Batch, LossSpec, ModelParams
from forgetbench.seeding import derive_seed

log = logging.getLogger(__name__)

CE = LossSpec("CE")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    shuffle: str = "per_epoch"  # or "fixed": one permutation reused every epoch

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.shuffle not in ("per_epoch", "fixed"):
            raise ValueError(f"unknown shuffle policy {self.shuffle!r}")


def minibatches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    perm = idx[rng.permutation(len(idx))]
    for start in range(0, len(perm), batch_size):
        yield perm[start : start + batch_size]


def train_with_history(ds: Dataset, idx, arch: Architecture, cfg: TrainConfig, seed):
    """Like :func:`train` but also returns the mean weighted loss of each epoch."""
    idx = np.asarray(idx, dtype=np.int64)
    if not len(idx):
        raise ValueError("cannot train on an empty index set")
    weights = class_weights(ds, idx)
    params = nn_core.init_params(arch, derive_seed(seed, "init"))
    state = params.zeros_like()
    shuffle_seed = derive_seed(seed, "shuffle")
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(shuffle_seed if cfg.shuffle == "fixed" else derive_seed(shuffle_seed, epoch))
        total, count = 0.0, 0
        for b in minibatches(idx, cfg.batch_size, rng):
            loss, grads = nn_core.loss_and_grad(params, Batch(ds.features[b], ds.labels[b]), CE, weights)
            params, state = nn_core.sgd_momentum_step(params, grads, state, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += loss * len(b)
            count += len(b)
        history.append(total / count)
        if not params.is_finite():
            raise nn_core.NumericalError(f"parameters diverged in epoch {epoch} (lr={cfg.lr})")
    return params, history


def train(ds: Dataset, idx, arch: Architecture, cfg: TrainConfig, seed) -> ModelParams:
    """Train from ``init_params`` with batch order reshuffled each epoch.

    Init and shuffling draw from separate substreams of ``seed``. Training on
    the full train split gives an original model; on the retain split, a
    retrained one.
    """
    return train_with_history(ds, idx, arch, cfg, seed)[0]


def accuracy(params: ModelParams, ds: Dataset, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if not len(idx):
        raise ValueError("accuracy of an empty index set is undefined")
    pred = np.argmax(nn_core.forward(params, ds.features[idx]), axis=1)
    return float(np.mean(pred == ds.labels[idx]))
