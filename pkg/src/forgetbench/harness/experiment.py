"""Experiments: build pools, unlearn, collect statistics, score.

Seeds. Pool models are keyed by an integer seed; experiment ``e`` of setup
FULL uses seeds ``base + e*N + i``, the reuse setups use ``base + i``. The
training stream of a pool model is ``derive_seed(seed, world)``. Unlearning run
``i`` of experiment ``e`` is seeded with ``derive_seed(base, "unlearn", e, i)``
and bootstrap resample ``e`` with ``derive_seed(base, "bootstrap", e)``.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from forgetbench import nn_core
from forgetbench.attack import EpsilonConfig, estimate_epsilons, per_example_epsilon
from forgetbench.harness.problem import Problem, ProblemConfig, build_problem
from forgetbench.harness.store import ModelPoolStore
from forgetbench.scoring import BinningConfig, Scorecard, make_scorecard, mia_gap_many
from forgetbench.seeding import derive_seed
from forgetbench.train import TrainConfig
from forgetbench.unlearn import PipelineSpec, RuntimeBudget, make_preset, run_pipeline

log = logging.getLogger(__name__)

MIA_FOLDS = 10
# wall-time dependent, so reports keep it out of the JSON (see report.py)
BUDGET_WARNING = "exceeded the runtime budget"


class Setup(str, enum.Enum):
    FULL = "FULL"
    REUSE_N_N = "REUSE_N_N"
    REUSE_N_1 = "REUSE_N_1"
    BOOTSTRAP = "BOOTSTRAP"


@dataclasses.dataclass(frozen=True, eq=False)
class ExperimentConfig:
    n_models: int = 64
    n_experiments: int = 20
    setup: Setup = Setup.REUSE_N_N
    pool_size: int | None = None
    base_seed: int = 0
    epsilon: EpsilonConfig = EpsilonConfig()
    binning: BinningConfig = BinningConfig()
    train: TrainConfig = TrainConfig()
    pipeline: PipelineSpec | None = None
    problem: ProblemConfig = ProblemConfig()
    budget_fraction: float = 0.20
    mia_models: int = 4
    workers: int = 1
    level: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "setup", Setup(self.setup))
        if self.pipeline is None:
            object.__setattr__(self, "pipeline", make_preset("finetune"))
        if self.n_models < 2:
            raise ValueError("n_models (N) must be >= 2")
        if self.n_experiments < 1:
            raise ValueError("n_experiments (E) must be >= 1")
        if self.pool_size is not None and self.pool_size < self.n_models:
            raise ValueError("pool_size (K) must be >= n_models (N)")
        if self.mia_models < 0:
            raise ValueError("mia_models must be >= 0")
        RuntimeBudget(self.budget_fraction)

    @property
    def bootstrap_pool_size(self) -> int:
        return self.pool_size if self.pool_size is not None else 8 * self.n_models

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


@dataclasses.dataclass
class ModelEval:
    """Everything scoring needs from one model."""

    stat: np.ndarray  # logit-scaled correct-class confidence per forget example
    acc: np.ndarray  # retain, test, forget accuracy
    forget_loss: np.ndarray
    test_loss: np.ndarray


def evaluate_model(params: nn_core.ModelParams, problem: Problem) -> ModelEval:
    ds, sp = problem.ds, problem.splits
    accs, conf = [], {}
    for name in ("retain", "test", "forget"):
        idx = np.asarray(getattr(sp, name))
        logits = nn_core.forward(params, ds.features[idx])
        accs.append(float(np.mean(np.argmax(logits, axis=1) == ds.labels[idx])))
        p = nn_core.softmax(logits.astype(np.float64))[np.arange(len(idx)), ds.labels[idx]]
        conf[name] = np.clip(p, nn_core.PROB_CLAMP, 1.0 - nn_core.PROB_CLAMP)
    return ModelEval(
        stat=nn_core.logit_scale(conf["forget"]),
        acc=np.array(accs),
        forget_loss=-np.log(conf["forget"]),
        test_loss=-np.log(conf["test"]),
    )


def _unlearn_one(spec, original, problem, seed, budget):
    run = run_pipeline(spec, original, problem.splits, problem.ds, seed, budget)
    return evaluate_model(run.params, problem), run.elapsed, run.over_budget


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(fn, *zip(*jobs)))
    return [fn(*job) for job in jobs]


def score_estimate(evals_u, evals_r, cfg: ExperimentConfig, warnings=()) -> tuple[Scorecard, np.ndarray, np.ndarray]:
    """One Scorecard from N unlearned and N retrained model evaluations.

    Also returns the two (|S|, N) statistic matrices.
    """
    u = np.stack([m.stat for m in evals_u], axis=1)
    r = np.stack([m.stat for m in evals_r], axis=1)
    eps, discarded = estimate_epsilons(u, r, cfg.epsilon)
    warnings = list(warnings)
    if discarded.any():
        warnings.append(f"{int(discarded.sum())} examples had every attack discarded (epsilon set to 0)")
    acc_u = np.mean([m.acc for m in evals_u], axis=0)
    acc_r = np.mean([m.acc for m in evals_r], axis=0)
    accuracies = {
        "retain_u": float(acc_u[0]),
        "test_u": float(acc_u[1]),
        "forget_u": float(acc_u[2]),
        "retain_r": float(acc_r[0]),
        "test_r": float(acc_r[1]),
        "forget_r": float(acc_r[2]),
    }
    mia = None
    pairs = min(cfg.mia_models, len(evals_u), len(evals_r))
    if pairs:
        if len(evals_u[0].forget_loss) < MIA_FOLDS:
            warnings.append(f"MIA skipped: fewer than {MIA_FOLDS} forget examples")
        else:
            mia = mia_gap_many(
                [(m.forget_loss, m.test_loss) for m in evals_u[:pairs]],
                [(m.forget_loss, m.test_loss) for m in evals_r[:pairs]],
                MIA_FOLDS,
            )
    card = make_scorecard(eps, accuracies, cfg.binning, cfg.epsilon.eps_cap, mia, warnings)
    return card, u, r


@dataclasses.dataclass
class ExperimentResult:
    """Scorecards of one algorithm under one setup, plus run bookkeeping.

    Iterating yields the Scorecards. ``elapsed`` holds unlearning wall times
    and stays out of reports so they remain reproducible byte for byte.
    """

    algorithm: str
    setup: str
    scorecards: list[Scorecard]
    elapsed: list[list[float]]
    stats_u: list[np.ndarray]
    stats_r: list[np.ndarray]
    trainings: dict
    budget_seconds: float | None = None

    def __iter__(self):
        return iter(self.scorecards)

    def __len__(self):
        return len(self.scorecards)

    def __getitem__(self, i):
        return self.scorecards[i]

    def values(self, field: str = "forgetting_quality") -> list[float]:
        return [getattr(c, field) for c in self.scorecards]


def _budget(entries, fraction) -> RuntimeBudget:
    times = [e["train_seconds"] for e in entries]
    return RuntimeBudget(fraction, float(np.median(times)) if times else None)


def _over_budget_warning(flags) -> list[str]:
    n = int(sum(flags))
    return [f"{n} of {len(flags)} unlearning runs {BUDGET_WARNING}"] if n else []


def _seed_plan(cfg: ExperimentConfig):
    """Original and retrained pool seeds per experiment."""
    n, base = cfg.n_models, cfg.base_seed
    plan = []
    for e in range(cfg.n_experiments):
        if cfg.setup is Setup.FULL:
            seeds = [base + e * n + i for i in range(n)]
            plan.append((seeds, seeds))
        elif cfg.setup is Setup.REUSE_N_N:
            seeds = [base + i for i in range(n)]
            plan.append((seeds, seeds))
        else:
            plan.append(([base], [base + i for i in range(n)]))
    return plan


def pool_seeds(cfg: ExperimentConfig) -> tuple[list[int], list[int]]:
    """Every original and retrained pool seed the configured setup touches."""
    if cfg.setup is Setup.BOOTSTRAP:
        seeds = [cfg.base_seed + i for i in range(cfg.bootstrap_pool_size)]
        return seeds, list(seeds)
    plan = _seed_plan(cfg)
    return sorted({s for o, _ in plan for s in o}), sorted({s for _, r in plan for s in r})


def run_experiment(cfg: ExperimentConfig, store: ModelPoolStore, problem: Problem | None = None) -> ExperimentResult:
    if cfg.setup is Setup.BOOTSTRAP:
        return run_bootstrap(cfg, store, problem)
    problem = problem or build_problem(cfg.problem)
    before = dict(store.trainings)
    plan = _seed_plan(cfg)
    o_all, r_all = pool_seeds(cfg)
    store.build_pool("original", o_all, problem, cfg.train)
    r_entries = store.build_pool("retrained", r_all, problem, cfg.train)
    budget = _budget(r_entries, cfg.budget_fraction)

    r_cache: dict[int, ModelEval] = {}
    cards, elapsed, stats_u, stats_r = [], [], [], []
    for e, (o_seeds, r_seeds) in enumerate(plan):
        originals = store.load_pool("original", o_seeds)
        if len(originals) == 1:
            originals = originals * cfg.n_models
        jobs = [
            (cfg.pipeline, theta, problem, derive_seed(cfg.base_seed, "unlearn", e, i), budget)
            for i, theta in enumerate(originals)
        ]
        out = _map(_unlearn_one, jobs, cfg.workers)
        evals_u = [o[0] for o in out]
        for s in r_seeds:
            if s not in r_cache:
                r_cache[s] = evaluate_model(store.load("retrained", s), problem)
        evals_r = [r_cache[s] for s in r_seeds]
        card, u, r = score_estimate(evals_u, evals_r, cfg, _over_budget_warning([o[2] for o in out]))
        cards.append(card)
        elapsed.append([o[1] for o in out])
        stats_u.append(u)
        stats_r.append(r)
    trainings = {w: store.trainings[w] - before[w] for w in store.trainings}
    return ExperimentResult(
        cfg.pipeline.name, cfg.setup.value, cards, elapsed, stats_u, stats_r, trainings, budget.limit_seconds
    )


def bootstrap_indices(cfg: ExperimentConfig, e: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(cfg.base_seed, "bootstrap", e))
    return rng.integers(cfg.bootstrap_pool_size, size=cfg.n_models)


def run_bootstrap(
    cfg: ExperimentConfig, store: ModelPoolStore, problem: Problem | None = None, indices=None
) -> ExperimentResult:
    """K triplets built once; estimate e scores N triplets drawn with replacement.

    ``indices`` (one index array per estimate) replaces the seeded resampling.
    """
    problem = problem or build_problem(cfg.problem)
    before = dict(store.trainings)
    k = cfg.bootstrap_pool_size
    seeds = [cfg.base_seed + i for i in range(k)]
    store.build_pool("original", seeds, problem, cfg.train)
    r_entries = store.build_pool("retrained", seeds, problem, cfg.train)
    budget = _budget(r_entries, cfg.budget_fraction)

    jobs = [
        (cfg.pipeline, store.load("original", s), problem, derive_seed(cfg.base_seed, "unlearn", 0, i), budget)
        for i, s in enumerate(seeds)
    ]
    out = _map(_unlearn_one, jobs, cfg.workers)
    evals_u = [o[0] for o in out]
    evals_r = [evaluate_model(store.load("retrained", s), problem) for s in seeds]
    over = [o[2] for o in out]

    if indices is None:
        indices = [bootstrap_indices(cfg, e) for e in range(cfg.n_experiments)]
    cards, stats_u, stats_r, elapsed = [], [], [], []
    for idx in indices:
        idx = np.asarray(idx, dtype=np.int64)
        card, u, r = score_estimate(
            [evals_u[i] for i in idx], [evals_r[i] for i in idx], cfg, _over_budget_warning([over[i] for i in idx])
        )
        cards.append(card)
        stats_u.append(u)
        stats_r.append(r)
        elapsed.append([out[i][1] for i in idx])
    trainings = {w: store.trainings[w] - before[w] for w in store.trainings}
    return ExperimentResult(
        cfg.pipeline.name, Setup.BOOTSTRAP.value, cards, elapsed, stats_u, stats_r, trainings, budget.limit_seconds
    )


def run_calibration(cfg: ExperimentConfig, store: ModelPoolStore, problem: Problem | None = None) -> np.ndarray:
    """Per-example epsilons of retrained models against other retrained models.

    Two disjoint retrained pools (seeds ``base .. base+N-1`` and
    ``base+N .. base+2N-1``) play the two worlds, so any distinguishability
    measured here is estimator noise.
    """
    problem = problem or build_problem(cfg.problem)
    n = cfg.n_models
    seeds = [cfg.base_seed + i for i in range(2 * n)]
    store.build_pool("retrained", seeds, problem, cfg.train)
    stats = [evaluate_model(store.load("retrained", s), problem).stat for s in seeds]
    u = np.stack(stats[n:], axis=1)
    r = np.stack(stats[:n], axis=1)
    eps, _ = estimate_epsilons(u, r, cfg.epsilon)
    return eps


def null_epsilon_samples(n_models: int, cfg: EpsilonConfig = EpsilonConfig(), trials: int = 1000, seed: int = 0):
    """Per-example epsilons when both worlds draw from one continuous distribution.

    The estimator depends on the samples only through their ranks, so any
    continuous distribution gives the same null; a standard normal is used.
    """
    rng = np.random.default_rng(seed)
    out = np.empty(trials)
    for t in range(trials):
        x = rng.standard_normal((2, n_models))
        out[t] = per_example_epsilon(x[0], x[1], cfg)
    return out


def null_epsilon_bound(n_models: int, cfg: EpsilonConfig = EpsilonConfig(), quantile: float = 0.95,
                       trials: int = 1000, seed: int = 0) -> float:
    samples = null_epsilon_samples(n_models, cfg, trials, seed)
    finite = samples[np.isfinite(samples)]
    if len(finite) < len(samples):
        return math.inf
    return float(np.quantile(finite, quantile))


def algorithm_config(cfg: ExperimentConfig, name: str, overrides: dict | None = None) -> ExperimentConfig:
    """``cfg`` with the pipeline swapped for a named preset (``retrain`` uses
    the experiment's own training config)."""
    return cfg.replace(pipeline=make_preset(name, overrides, train_cfg=cfg.train))
