"""JSON reports with CSV side files.

``<stem>.json`` holds the resolved config, per-estimate Scorecards, summaries
and the ranking. Next to it: ``<stem>.eps.<algorithm>.csv`` (one row per
forget example, one column per estimate), ``<stem>.hist.<algorithm>.csv``
(statistic histograms of both worlds) and ``<stem>.timing.csv`` (wall times
and over-budget flags, kept out of the JSON so reports reproduce byte for
byte).
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from forgetbench.harness.experiment import BUDGET_WARNING
from forgetbench.harness.stats import interval_or_point, rank_algorithms
from forgetbench.scoring import Scorecard, _encode_float

REPORT_VERSION = 1
HIST_BINS = 40


def _summary(result, level):
    out = {}
    for field in ("forgetting_quality", "final_score"):
        mean, lo, hi = interval_or_point(result.values(field), level)
        out[field] = {"mean": mean, "lo": lo, "hi": hi}
    return out


def _card_dict(card: Scorecard) -> dict:
    d = card.to_dict()
    d["warnings"] = [w for w in d["warnings"] if BUDGET_WARNING not in w]
    return d


def _side_path(path: Path, kind: str, name: str | None = None) -> Path:
    parts = [path.stem, kind] + ([name] if name else []) + ["csv"]
    return path.with_name(".".join(parts))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(results, path, config: dict, level: float = 0.95) -> Path:
    """Write the report and its side files; returns the report path."""
    results = list(results)
    if not results:
        raise ValueError("nothing to report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    eps_cfg = config.get("epsilon", {})
    bin_cfg = config.get("binning", {})
    report = {
        "version": REPORT_VERSION,
        "setup": results[0].setup,
        "delta": eps_cfg.get("delta", 0.0),
        "binning_mode": "floor+1" if bin_cfg.get("offset", 1) else "floor",
        "config": config,
        "algorithms": {},
    }
    for res in results:
        report["algorithms"][res.algorithm] = {
            "setup": res.setup,
            "trainings": dict(res.trainings),
            "summary": _summary(res, level),
            "scorecards": [_card_dict(c) for c in res.scorecards],
        }
    report["ranking"] = rank_algorithms({r.algorithm: r.values("final_score") for r in results}, level)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n")
    tmp.replace(path)

    timing_rows = []
    for res in results:
        eps = np.stack([np.asarray(c.eps) for c in res.scorecards], axis=1)
        _write_csv(
            _side_path(path, "eps", res.algorithm),
            ["example"] + [f"estimate_{e}" for e in range(eps.shape[1])],
            [[i] + [_encode_float(v) for v in row] for i, row in enumerate(eps)],
        )
        u = np.concatenate([m.ravel() for m in res.stats_u])
        r = np.concatenate([m.ravel() for m in res.stats_r])
        edges = np.histogram_bin_edges(np.concatenate([u, r]), bins=HIST_BINS)
        cu, _ = np.histogram(u, edges)
        cr, _ = np.histogram(r, edges)
        _write_csv(
            _side_path(path, "hist", res.algorithm),
            ["bin_lo", "bin_hi", "count_unlearned", "count_retrained"],
            [[repr(float(a)), repr(float(b)), int(x), int(y)] for a, b, x, y in zip(edges[:-1], edges[1:], cu, cr)],
        )
        limit = res.budget_seconds
        for e, times in enumerate(res.elapsed):
            timing_rows += [
                [res.algorithm, e, i, repr(t), "" if limit is None else int(t > limit)] for i, t in enumerate(times)
            ]
    _write_csv(_side_path(path, "timing"), ["algorithm", "estimate", "run", "seconds", "over_budget"], timing_rows)
    return path


def load_report(path) -> dict:
    """Read a report back; Scorecards are rebuilt as objects."""
    report = json.loads(Path(path).read_text())
    if report.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {report.get('version')}")
    for entry in report["algorithms"].values():
        entry["scorecards"] = [Scorecard.from_dict(c) for c in entry["scorecards"]]
    return report


def read_eps_csv(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in row[1:]] for row in rows], dtype=np.float64).reshape(len(rows), -1)

