"""Binned forgetting quality, utility-adjusted final score and proxy metrics."""
from __future__ import annotations

import dataclasses
import math

import numpy as np


@dataclasses.dataclass(frozen=True)
class BinningConfig:
    """``n(eps) = floor(eps / bin_width) + offset``; points are ``2 / 2**n``.

    offset=1 (default) keeps every example's points in [0, 1]. offset=0 is the
    literal floor indexing, under which an example with eps < bin_width earns
    2 points. Examples whose bin index exceeds ``n_bins`` (including
    eps = +inf) earn 0.
    """

    bin_width: float = 0.5
    n_bins: int = 13
    offset: int = 1

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.offset not in (0, 1):
            raise ValueError("offset is 0 (floor) or 1 (floor + 1)")

    @property
    def mode(self) -> str:
        return "floor+1" if self.offset else "floor"


def h_points(eps: float, cfg: BinningConfig = BinningConfig()) -> float:
    if math.isnan(eps) or eps < 0:
        raise ValueError(f"epsilon must be >= 0 or +inf, got {eps}")
    if math.isinf(eps):
        return 0.0
    n = math.floor(eps / cfg.bin_width) + cfg.offset
    if n > cfg.n_bins:
        return 0.0
    return 2.0 / 2.0**n


def forgetting_quality(eps_vector, cfg: BinningConfig = BinningConfig()) -> float:
    eps = np.asarray(eps_vector, dtype=np.float64).ravel()
    if not len(eps):
        raise ValueError("need at least one epsilon")
    return float(np.mean([h_points(float(e), cfg) for e in eps]))


def final_score(f: float, retain_acc_u: float, retain_acc_r: float, test_acc_u: float, test_acc_r: float) -> float:
    """F scaled by the retain- and test-accuracy ratios against retraining (no cap)."""
    if retain_acc_r <= 0 or test_acc_r <= 0:
        raise ValueError("retrained accuracies must be positive")
    return f * (retain_acc_u / retain_acc_r) * (test_acc_u / test_acc_r)


def accuracy_gap(forget_acc_u: float, forget_acc_r: float) -> float:
    return abs(forget_acc_u - forget_acc_r)


def _fit_logistic(x: np.ndarray, t: np.ndarray, tol: float = 1e-8, max_iter: int = 5000, lr: float = 1.0):
    """Full-batch gradient descent on mean log-loss for p = sigmoid(w x + b)."""
    w = b = 0.0
    for _ in range(max_iter):
        z = w * x + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        err = p - t
        gw = float(np.mean(err * x))
        gb = float(np.mean(err))
        w -= lr * gw
        b -= lr * gb
        if math.hypot(gw, gb) < tol:
            break
    return w, b


def _fold_ids(n: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    ids = np.arange(n) % folds
    return ids[rng.permutation(n)]


def mia_score(losses_forget, losses_test, folds: int = 10, seed: int = 0, balance: bool = True) -> float:
    """Held-out accuracy of a one-feature logistic classifier telling forget
    losses (positive) from test losses (negative), averaged over k folds.

    With ``balance`` the longer list is subsampled (seeded) to the length of
    the shorter one, so chance level is 0.5 instead of the majority share.
    The feature is standardized with the training fold's mean and spread.
    Forget and test lists are folded separately (stratified).
    """
    lf = np.asarray(losses_forget, dtype=np.float64)
    lt = np.asarray(losses_test, dtype=np.float64)
    if len(lf) < folds or len(lt) < folds:
        raise ValueError(f"need at least {folds} losses per list, got {len(lf)} and {len(lt)}")
    rng = np.random.default_rng(seed)
    if balance:
        n = min(len(lf), len(lt))
        lf = lf[np.sort(rng.permutation(len(lf))[:n])]
        lt = lt[np.sort(rng.permutation(len(lt))[:n])]
    x = np.concatenate([lf, lt])
    t = np.concatenate([np.ones(len(lf)), np.zeros(len(lt))])
    fold = np.concatenate([_fold_ids(len(lf), folds, rng), _fold_ids(len(lt), folds, rng)])
    accs = []
    for k in range(folds):
        tr, te = fold != k, fold == k
        mu = x[tr].mean()
        sd = x[tr].std()
        sd = sd if sd > 0 else 1.0
        w, b = _fit_logistic((x[tr] - mu) / sd, t[tr])
        pred = (w * (x[te] - mu) / sd + b) > 0
        accs.append(np.mean(pred == (t[te] > 0)))
    return float(np.mean(accs))


def mia_gap(losses_u_forget, losses_u_test, losses_r_forget, losses_r_test, folds: int = 10, seed: int = 0) -> float:
    """|MIA accuracy on the unlearned model - MIA accuracy on the retrained model|.

    Both worlds use the same fold assignment (same seed).
    """
    score_u = mia_score(losses_u_forget, losses_u_test, folds, seed)
    score_r = mia_score(losses_r_forget, losses_r_test, folds, seed)
    return abs(score_u - score_r)


def mia_gap_many(pairs_u, pairs_r, folds: int = 10, seed: int = 0) -> float:
    """Gap between the mean MIA accuracy over several unlearned models and the
    mean over several retrained models. Each pair is (forget losses, test losses)."""
    if not pairs_u or not pairs_r:
        raise ValueError("need at least one model per world")
    score_u = np.mean([mia_score(f, t, folds, seed + j) for j, (f, t) in enumerate(pairs_u)])
    score_r = np.mean([mia_score(f, t, folds, seed + j) for j, (f, t) in enumerate(pairs_r)])
    return float(abs(score_u - score_r))


@dataclasses.dataclass
class Scorecard:
    eps: np.ndarray
    forgetting_quality: float
    retain_acc_u: float
    retain_acc_r: float
    test_acc_u: float
    test_acc_r: float
    forget_acc_u: float
    forget_acc_r: float
    final_score: float
    accuracy_gap: float
    mia_gap: float | None = None
    warnings: list[str] = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eps"] = [_encode_float(e) for e in np.asarray(self.eps, dtype=np.float64)]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scorecard":
        d = dict(d)
        d["eps"] = np.array([_decode_float(e) for e in d["eps"]], dtype=np.float64)
        d["warnings"] = list(d.get("warnings", []))
        return cls(**d)


def _encode_float(x: float):
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def _decode_float(x) -> float:
    return float(x)


def make_scorecard(
    eps,
    accuracies: dict,
    binning: BinningConfig = BinningConfig(),
    eps_cap: float | None = None,
    mia: float | None = None,
    warnings: list[str] | None = None,
) -> Scorecard:
    """Aggregate per-example epsilons and mean accuracies into a Scorecard.

    ``accuracies`` maps ``{retain,test,forget}_{u,r}`` to mean accuracies.
    """
    eps = np.asarray(eps, dtype=np.float64)
    binned = eps if eps_cap is None else np.minimum(eps, eps_cap)
    f = forgetting_quality(binned, binning)
    a = accuracies
    return Scorecard(
        eps=eps,
        forgetting_quality=f,
        retain_acc_u=a["retain_u"],
        retain_acc_r=a["retain_r"],
        test_acc_u=a["test_u"],
        test_acc_r=a["test_r"],
        forget_acc_u=a["forget_u"],
        forget_acc_r=a["forget_r"],
        final_score=final_score(f, a["retain_u"], a["retain_r"], a["test_u"], a["test_r"]),
        accuracy_gap=accuracy_gap(a["forget_u"], a["forget_r"]),
        mia_gap=mia,
        warnings=list(warnings or []),
    )
