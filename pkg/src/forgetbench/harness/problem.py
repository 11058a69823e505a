"""The learning problem an experiment runs on: data, splits and network shape."""
from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from forgetbench.data import Dataset, Splits, generate_synthetic, load_csv, split_retain_forget, split_train_val_test
from forgetbench.nn_core import Architecture


@dataclasses.dataclass(frozen=True)
class ProblemConfig:
    """Synthetic toy problem by default; ``csv_path`` swaps in a dataset file."""

    n_subjects: int = 200
    examples_per_subject: tuple[int, int] = (5, 15)
    n_classes: int = 10
    feature_dim: int = 16
    imbalance_exponent: float = 1.0
    class_sep: float = 1.0
    subject_std: float = 2.0
    noise_std: float = 1.0
    data_seed: int = 0
    split_seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    forget_fraction: float = 0.02
    hidden: tuple[int, ...] = (32,)
    csv_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "examples_per_subject", tuple(self.examples_per_subject))
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclasses.dataclass(frozen=True, eq=False)
class Problem:
    ds: Dataset
    splits: Splits
    arch: Architecture

    def digest(self) -> str:
        """Hash of the data, the split indices and the architecture."""
        h = hashlib.sha256(self.ds.fingerprint().encode())
        h.update(json.dumps(self.splits.to_dict(), sort_keys=True).encode())
        h.update(json.dumps(list(self.arch.layer_sizes)).encode())
        return h.hexdigest()

    def forget_xy(self):
        idx = np.asarray(self.splits.forget)
        return self.ds.features[idx], self.ds.labels[idx]


def build_problem(cfg: ProblemConfig) -> Problem:
    if cfg.csv_path:
        ds = load_csv(cfg.csv_path, n_classes=cfg.n_classes)
    else:
        ds = generate_synthetic(
            cfg.n_subjects,
            cfg.examples_per_subject,
            cfg.n_classes,
            cfg.feature_dim,
            cfg.imbalance_exponent,
            cfg.data_seed,
            class_sep=cfg.class_sep,
            subject_std=cfg.subject_std,
            noise_std=cfg.noise_std,
        )
    splits = split_train_val_test(ds, cfg.split_fractions, seed=cfg.split_seed)
    splits = split_retain_forget(ds, splits, cfg.forget_fraction, seed=cfg.split_seed)
    arch = Architecture((ds.feature_dim, *cfg.hidden, ds.n_classes))
    return Problem(ds, splits, arch)
