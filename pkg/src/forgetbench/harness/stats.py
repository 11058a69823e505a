"""Confidence intervals and ranking over repeated estimates."""
from __future__ import annotations

import numpy as np


def confidence_interval(samples, level: float = 0.95) -> tuple[float, float, float]:
    """(mean, lo, hi) with a percentile interval (linear interpolation)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 2:
        raise ValueError("a confidence interval needs at least 2 samples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(x, [tail, 100.0 - tail])
    return float(np.mean(x)), float(lo), float(hi)


def interval_or_point(samples, level):
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 2:
        m = float(x.mean())
        return m, m, m
    return confidence_interval(x, level)


def rank_algorithms(scores: dict, level: float = 0.95) -> list[list[str]]:
    """Order algorithms by mean score, best first, as a list of tied groups.

    ``scores`` maps a name to its per-estimate final scores. Neighbours in the
    sorted order whose intervals overlap are chained into one group.
    """
    if not scores:
        raise ValueError("need at least one algorithm")
    stats = {name: interval_or_point(v, level) for name, v in scores.items()}
    order = sorted(stats, key=lambda n: (-stats[n][0], n))
    groups = [[order[0]]]
    group_lo = stats[order[0]][1]
    for name in order[1:]:
        _, lo, hi = stats[name]
        if hi >= group_lo:
            groups[-1].append(name)
            group_lo = min(group_lo, lo)
        else:
            groups.append([name])
            group_lo = lo
    return groups
