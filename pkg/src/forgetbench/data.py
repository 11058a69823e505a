"""Subject-structured synthetic data, CSV ingestion and split logic."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from pathlib import Path

import numpy as np

from forgetbench.nn_core import ClassWeights

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    subject: int


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray  # (n,) int64
    subjects: np.ndarray  # (n,) int64
    n_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.asarray(self.labels, dtype=np.int64)
        s = np.asarray(self.subjects, dtype=np.int64)
        if x.ndim != 2 or not len(x):
            raise ValueError("dataset must be a non-empty (n, d) feature matrix")
        if y.shape != (len(x),) or s.shape != (len(x),):
            raise ValueError("labels and subjects need one entry per example")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        for name, arr in (("features", x), ("labels", y), ("subjects", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Example:
        return Example(self.features[i], int(self.labels[i]), int(self.subjects[i]))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.subjects):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.n_classes).encode())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.subjects, other.subjects)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    retain: np.ndarray | None = None
    forget: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {k: (None if v is None else v.tolist()) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Splits":
        return cls(**{k: (None if v is None else np.asarray(v, dtype=np.int64)) for k, v in d.items()})


def _largest_remainder(total: int, probs: np.ndarray) -> np.ndarray:
    raw = total * probs
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    # ties go to the lower class id so the counts stay non-increasing
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def generate_synthetic(
    n_subjects: int,
    examples_per_subject_range: tuple[int, int],
    n_classes: int,
    feature_dim: int,
    imbalance_exponent: float,
    seed: int,
    class_sep: float = 2.0,
    subject_std: float = 0.6,
    noise_std: float = 1.0,
) -> Dataset:
    """Gaussian class clusters with per-subject offsets and power-law classes.

    Class k receives a share proportional to (k + 1) ** -imbalance_exponent of
    all examples (exact quotas, largest-remainder rounding). Labels are laid
    out over subjects in a shuffled order, so nearly every subject carries a
    single label; only the subjects straddling a quota boundary mix two.
    """
    lo, hi = examples_per_subject_range
    if min(n_subjects, lo, hi, n_classes, feature_dim) < 1 or lo > hi:
        raise ValueError("counts must be positive and the per-subject range ordered")
    rng = np.random.default_rng(seed)
    sizes = rng.integers(lo, hi + 1, size=n_subjects)
    total = int(sizes.sum())
    shares = (np.arange(n_classes) + 1.0) ** -float(imbalance_exponent)
    quotas = _largest_remainder(total, shares / shares.sum())

    order = rng.permutation(n_subjects)
    subjects = np.repeat(order, sizes[order])
    labels = np.repeat(np.arange(n_classes), quotas)

    centers = rng.normal(0.0, class_sep, size=(n_classes, feature_dim))
    offsets = rng.normal(0.0, subject_std, size=(n_subjects, feature_dim))
    noise = rng.normal(0.0, noise_std, size=(total, feature_dim))
    features = centers[labels] + offsets[subjects] + noise
    return Dataset(features, labels, subjects, n_classes)


def split_train_val_test(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Splits:
    """Uniform example-level partition. Val/test sizes are rounded, train takes the rest."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    n_val, n_test = (int(round(n * f)) for f in fr[1:])
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} examples cannot fill every split with fractions {tuple(fractions)}")
    perm = np.random.default_rng(seed).permutation(n)
    return Splits(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
    )


def split_retain_forget(ds: Dataset, splits: Splits, forget_fraction: float, seed: int = 0) -> Splits:
    """Move whole subjects (random order) into the forget set until it holds
    at least ``forget_fraction`` of the training examples."""
    if not 0.0 < forget_fraction < 1.0:
        raise ValueError("forget_fraction must lie in (0, 1)")
    train = np.asarray(splits.train)
    subj = ds.subjects[train]
    uniq = np.unique(subj)
    if len(uniq) < 2:
        raise ValueError("training set holds a single subject; cannot split retain/forget")
    target = forget_fraction * len(train)
    counts = dict(zip(*np.unique(subj, return_counts=True)))
    chosen, size = [], 0
    for s in np.random.default_rng(seed).permutation(uniq):
        if size >= target:
            break
        chosen.append(s)
        size += counts[s]
    if len(chosen) == len(uniq):
        raise ValueError("forget fraction consumes every subject; retain set would be empty")
    in_forget = np.isin(subj, chosen)
    return dataclasses.replace(splits, retain=train[~in_forget], forget=train[in_forget])


def class_weights(ds: Dataset, idx) -> ClassWeights:
    counts = np.bincount(ds.labels[np.asarray(idx)], minlength=ds.n_classes)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise ValueError(f"classes {missing.tolist()} do not occur in the index set")
    return ClassWeights(1.0 / counts)


def majority_class(ds: Dataset, idx) -> int:
    return int(np.argmax(np.bincount(ds.labels[np.asarray(idx)], minlength=ds.n_classes)))


def save_csv(ds: Dataset, path) -> None:
    path = Path(path)
    d = ds.feature_dim
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label"] + [f"f_{j + 1}" for j in range(d)])
        for x, y, s in zip(ds.features, ds.labels, ds.subjects):
            w.writerow([int(s), int(y)] + [repr(float(v)) for v in x])


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``subject_id,label,f_1..f_d`` rows. Class count defaults to max label + 1."""
    rows_x, rows_y, rows_s = [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["subject_id", "label"]:
            raise ValueError(f"{path}:1: expected header starting with subject_id,label")
        d = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise ValueError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                rows_s.append(int(row[0]))
                rows_y.append(int(row[1]))
                rows_x.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows_y:
        raise ValueError(f"{path}: no examples")
    k = n_classes if n_classes is not None else max(rows_y) + 1
    return Dataset(np.array(rows_x), np.array(rows_y), np.array(rows_s), k)
