"""Per-example epsilon from threshold attacks on a 1-D statistic.

For one forget example we hold N samples of the logit-scaled confidence under
unlearned models (``u``) and N under retrained models (``r``). Each attack is
a rule predicting "unlearned" on a region of the real line; its empirical FPR
(retrained samples flagged unlearned) and FNR (unlearned samples missed) are
turned into an epsilon, and the strongest attack wins.

Every rule is stored as an interval ``(lo, hi]`` plus an orientation bit:
orientation 0 predicts unlearned inside the interval, orientation 1 outside.
A single-threshold rule "x > t" is ``(t, +inf]``, and its flip is "x <= t".
"""
from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from forgetbench import nn_core

log = logging.getLogger(__name__)

DISCARD = math.nan  # marker for an attack whose rates carry no usable bound
KDE_MIN_BANDWIDTH = 1e-3


@dataclasses.dataclass(frozen=True, eq=False)
class StatMatrix:
    values: np.ndarray  # (|S|, N)
    world: str  # "unlearned" or "retrained"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < 2:
            raise ValueError(f"need a 2-D matrix with at least 2 samples per row, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("statistics must be finite")
        if self.world not in ("unlearned", "retrained"):
            raise ValueError(f"unknown world {self.world!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_examples(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def save_csv(self, path) -> None:
        """One row per example, one column per model sample (17 significant digits)."""
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g")

    @classmethod
    def load_csv(cls, path, world: str) -> "StatMatrix":
        values = np.loadtxt(Path(path), delimiter=",", ndmin=2, dtype=np.float64)
        return cls(values, world)


@dataclasses.dataclass(frozen=True)
class AttackRule:
    lo: float
    hi: float
    orientation: int = 0
    family: str = "double"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got ({self.lo}, {self.hi})")
        if self.orientation not in (0, 1):
            raise ValueError("orientation is 0 or 1")

    @classmethod
    def single(cls, t: float, orientation: int = 0) -> "AttackRule":
        """Orientation 0: x > t means unlearned; orientation 1: x <= t."""
        return cls(float(t), math.inf, orientation, "single")

    @classmethod
    def double(cls, t1: float, t2: float, orientation: int = 0) -> "AttackRule":
        """Orientation 0: t1 < x <= t2 means unlearned; orientation 1: outside."""
        return cls(float(t1), float(t2), orientation, "double")

    def predicts_unlearned(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        inside = (x > self.lo) & (x <= self.hi)
        return inside if self.orientation == 0 else ~inside

    def positive_mass(self, samples, bandwidth: float) -> float:
        """Probability of the unlearned region under a Gaussian KDE of ``samples``."""
        s = np.asarray(samples, dtype=np.float64)
        inside = float(np.mean(ndtr((self.hi - s) / bandwidth) - ndtr((self.lo - s) / bandwidth)))
        inside = min(max(inside, 0.0), 1.0)
        return inside if self.orientation == 0 else 1.0 - inside


@dataclasses.dataclass(frozen=True)
class EpsilonConfig:
    delta: float = 0.0
    grid_size: int = 64
    families: tuple[str, ...] = ("single", "double")
    eps_cap: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        fams = tuple(self.families)
        if not fams or set(fams) - {"single", "double"}:
            raise ValueError(f"families must be a non-empty subset of single/double, got {fams}")
        object.__setattr__(self, "families", fams)


def rule_rates(rule: AttackRule, u_row, r_row) -> tuple[float, float]:
    u = np.asarray(u_row, dtype=np.float64)
    r = np.asarray(r_row, dtype=np.float64)
    if not len(u) or not len(r):
        raise ValueError("rows must be non-empty")
    fpr = np.count_nonzero(rule.predicts_unlearned(r)) / len(r)
    fnr = np.count_nonzero(~rule.predicts_unlearned(u)) / len(u)
    return fpr, fnr


def _best_ratio(fpr, fnr, delta):
    """Larger of the two likelihood-ratio bounds; non-positive means invalid."""
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(fnr > 0, (1.0 - delta - fpr) / np.where(fnr > 0, fnr, 1.0), -1.0)
        b = np.where(fpr > 0, (1.0 - delta - fnr) / np.where(fpr > 0, fpr, 1.0), -1.0)
    return np.maximum(a, b)


def eps_from_rates(fpr: float, fnr: float, delta: float = 0.0) -> float:
    """Epsilon implied by one attack. +inf on perfect separation, NaN (DISCARD)
    when exactly one rate is zero or when both log arguments are non-positive."""
    if not (0.0 <= fpr <= 1.0 and 0.0 <= fnr <= 1.0):
        raise ValueError(f"rates must lie in [0, 1], got ({fpr}, {fnr})")
    if fpr == 0 and fnr == 0:
        return math.inf
    if fpr == 0 or fnr == 0:
        return DISCARD
    ratio = float(_best_ratio(np.float64(fpr), np.float64(fnr), delta))
    return math.log(ratio) if ratio > 0 else DISCARD


def _grid(pooled: np.ndarray, grid_size: int):
    """Midpoints between consecutive distinct pooled values.

    Returns (single_thresholds, double_grid). The double grid brackets the
    midpoints with -inf/+inf; if that exceeds ``grid_size`` points it is
    thinned to ``grid_size`` evenly spaced ranks (ends kept).
    """
    v = np.unique(pooled)
    mids = (v[:-1] + v[1:]) / 2.0
    full = np.concatenate(([-np.inf], mids, [np.inf]))
    if len(full) > grid_size:
        full = full[np.unique(np.round(np.linspace(0, len(full) - 1, grid_size)).astype(np.int64))]
    return mids, full


def enumerate_rules(u_row, r_row, cfg: EpsilonConfig = EpsilonConfig()):
    """All candidate rules with their integer error counts.

    Returns a dict of parallel arrays: lo, hi, orientation, family (0 single,
    1 double), fp (retrained samples flagged), fn (unlearned samples missed),
    and the row sizes nu, nr.
    """
    u = np.sort(np.asarray(u_row, dtype=np.float64))
    r = np.sort(np.asarray(r_row, dtype=np.float64))
    if len(u) < 2 or len(r) < 2:
        raise ValueError("each row needs at least 2 samples")
    mids, grid = _grid(np.concatenate([u, r]), cfg.grid_size)
    los, his, fams = [], [], []
    if "single" in cfg.families:
        los.append(mids)
        his.append(np.full(len(mids), np.inf))
        fams.append(np.zeros(len(mids), dtype=np.int8))
    if "double" in cfg.families:
        i, j = np.triu_indices(len(grid), k=1)
        los.append(grid[i])
        his.append(grid[j])
        fams.append(np.ones(len(i), dtype=np.int8))
    lo = np.concatenate(los)
    hi = np.concatenate(his)
    fam = np.concatenate(fams)
    inside_u = np.searchsorted(u, hi, "right") - np.searchsorted(u, lo, "right")
    inside_r = np.searchsorted(r, hi, "right") - np.searchsorted(r, lo, "right")
    nu, nr = len(u), len(r)
    return {
        "lo": np.concatenate([lo, lo]),
        "hi": np.concatenate([hi, hi]),
        "orientation": np.repeat(np.array([0, 1], dtype=np.int8), len(lo)),
        "family": np.concatenate([fam, fam]),
        "fp": np.concatenate([inside_r, nr - inside_r]),
        "fn": np.concatenate([nu - inside_u, inside_u]),
        "nu": nu,
        "nr": nr,
    }


def _count_ratio(fp, fn, nr, nu, delta):
    """_best_ratio written on error counts. With delta = 0 numerator and
    denominator are exact integers, so equal rates give a ratio of exactly 1."""
    fp = fp.astype(np.float64)
    fn = fn.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(fn > 0, ((1.0 - delta) * nr - fp) * nu / np.where(fn > 0, nr * fn, 1.0), -1.0)
        b = np.where(fp > 0, ((1.0 - delta) * nu - fn) * nr / np.where(fp > 0, nu * fp, 1.0), -1.0)
    return np.maximum(a, b)


def _rule_scores(rules, delta):
    """Per-rule sort key: +inf for perfect separation, NaN for discarded
    rules, otherwise the winning likelihood ratio (epsilon = log of it)."""
    fp, fn = rules["fp"], rules["fn"]
    ratio = _count_ratio(fp, fn, rules["nr"], rules["nu"], delta)
    score = np.where(ratio > 0, ratio, np.nan)
    score = np.where((fp == 0) | (fn == 0), np.nan, score)
    return np.where((fp == 0) & (fn == 0), np.inf, score)


def _strongest(u_row, r_row, cfg: EpsilonConfig):
    rules = enumerate_rules(u_row, r_row, cfg)
    score = _rule_scores(rules, cfg.delta)
    if np.isnan(score).all():
        return 0.0, True, None, rules
    best = int(np.nanargmax(score))
    top = score[best]
    eps = math.inf if math.isinf(top) else max(math.log(top), 0.0)
    return eps, False, best, rules


def per_example_epsilon(u_row, r_row, cfg: EpsilonConfig = EpsilonConfig()) -> float:
    """Epsilon of the strongest single/double-threshold attack (both orientations).

    If every candidate attack is discarded the result is 0 and a warning is
    logged; :func:`estimate_epsilons` surfaces that case as a flag instead.
    Estimates are floored at 0.
    """
    eps, all_discarded, _, _ = _strongest(u_row, r_row, cfg)
    if all_discarded:
        log.warning("every attack was discarded; reporting epsilon = 0")
    return eps


def best_rule(u_row, r_row, cfg: EpsilonConfig = EpsilonConfig()) -> tuple[AttackRule | None, float]:
    eps, all_discarded, i, rules = _strongest(u_row, r_row, cfg)
    if all_discarded:
        return None, eps
    family = "single" if rules["family"][i] == 0 else "double"
    rule = AttackRule(float(rules["lo"][i]), float(rules["hi"][i]), int(rules["orientation"][i]), family)
    return rule, eps


def estimate_epsilons(u_matrix, r_matrix, cfg: EpsilonConfig = EpsilonConfig()):
    """Row-wise epsilons for two (|S|, N) statistic matrices.

    Returns (eps, all_discarded_flags).
    """
    u = getattr(u_matrix, "values", u_matrix)
    r = getattr(r_matrix, "values", r_matrix)
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if u.shape[0] != r.shape[0]:
        raise ValueError(f"row counts differ: {u.shape[0]} vs {r.shape[0]}")
    eps = np.empty(u.shape[0])
    flags = np.zeros(u.shape[0], dtype=bool)
    for i in range(u.shape[0]):
        eps[i], flags[i], _, _ = _strongest(u[i], r[i], cfg)
    if flags.any():
        log.warning("%d of %d examples had every attack discarded", int(flags.sum()), len(flags))
    return eps, flags


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    std = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.34
    sigma = min(std, iqr) if iqr > 0 else std
    return max(0.9 * sigma * n ** (-0.2), KDE_MIN_BANDWIDTH)


def per_example_epsilon_disentangled(u_fit, r_fit, u_eval, r_eval, cfg: EpsilonConfig = EpsilonConfig()) -> float:
    """Fit the strongest rule on one pair of rows, score it on another.

    The evaluation rows are smoothed with a Gaussian KDE (Silverman bandwidth
    per row) so the fixed rule's error rates are rarely exactly zero.
    """
    for row in (u_fit, r_fit, u_eval, r_eval):
        if len(row) < 2:
            raise ValueError("each row needs at least 2 samples")
    rule, _ = best_rule(u_fit, r_fit, cfg)
    if rule is None:
        log.warning("every attack was discarded while fitting; reporting epsilon = 0")
        return 0.0
    fpr = rule.positive_mass(r_eval, silverman_bandwidth(r_eval))
    fnr = 1.0 - rule.positive_mass(u_eval, silverman_bandwidth(u_eval))
    eps = eps_from_rates(min(max(fpr, 0.0), 1.0), min(max(fnr, 0.0), 1.0), cfg.delta)
    if math.isnan(eps):
        return 0.0
    return max(eps, 0.0)


def collect_statistics(models: Sequence[nn_core.ModelParams], x, y, world: str = "unlearned") -> StatMatrix:
    """Logit-scaled correct-class confidence of every forget example under every model."""
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise ValueError(f"architecture mismatch: {m.arch.layer_sizes} vs {arch.layer_sizes}")
    cols = [nn_core.logit_scale(nn_core.confidence_correct(m, x, y)) for m in models]
    return StatMatrix(np.stack(cols, axis=1), world)
