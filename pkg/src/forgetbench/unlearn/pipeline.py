"""Pipelines: ordered phase lists, their execution, budgeting and stitching."""
from __future__ import annotations

import dataclasses
import logging
import time

import yaml

from forgetbench.data import Dataset, Splits
from forgetbench.nn_core import ModelParams
from forgetbench.seeding import derive_seed
from forgetbench.unlearn.phases import Phase, PhaseContext, apply_phase, phase_from_dict, phase_to_dict

log = logging.getLogger(__name__)

PIPELINE_FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class PipelineSpec:
    name: str
    phases: tuple[Phase, ...]
    hyperparameters: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ValueError(f"pipeline {self.name!r} has no phases")

    def roles(self) -> list[str]:
        return [p.role for p in self.phases]

    def to_dict(self) -> dict:
        return {
            "version": PIPELINE_FORMAT_VERSION,
            "name": self.name,
            "hyperparameters": dict(self.hyperparameters),
            "phases": [phase_to_dict(p) for p in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        version = d.get("version", PIPELINE_FORMAT_VERSION)
        if version != PIPELINE_FORMAT_VERSION:
            raise ValueError(f"unsupported pipeline format version {version}")
        if "name" not in d or "phases" not in d:
            raise ValueError("pipeline config needs 'name' and 'phases'")
        return cls(d["name"], tuple(phase_from_dict(p) for p in d["phases"]), dict(d.get("hyperparameters") or {}))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "PipelineSpec":
        d = yaml.safe_load(text)
        if not isinstance(d, dict):
            raise ValueError("pipeline config must be a mapping")
        return cls.from_dict(d)


@dataclasses.dataclass(frozen=True)
class RuntimeBudget:
    """Allowed wall time as a fraction of a measured retrain time."""

    fraction: float = 0.20
    reference_seconds: float | None = None

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("budget fraction must lie in (0, 1]")
        if self.reference_seconds is not None and self.reference_seconds < 0:
            raise ValueError("reference time must be >= 0")

    @property
    def limit_seconds(self) -> float | None:
        return None if self.reference_seconds is None else self.fraction * self.reference_seconds

    def exceeded(self, elapsed: float) -> bool:
        limit = self.limit_seconds
        return limit is not None and elapsed > limit


@dataclasses.dataclass
class PipelineRun:
    params: ModelParams
    elapsed: float
    over_budget: bool

    def __iter__(self):
        # unpacks as (params, elapsed)
        return iter((self.params, self.elapsed))


def run_pipeline(
    spec: PipelineSpec,
    original: ModelParams,
    splits: Splits,
    ds: Dataset,
    seed,
    budget: RuntimeBudget | None = None,
) -> PipelineRun:
    """Apply the phases in order, phase i seeded from substream ``(seed, i)``.

    An over-budget run still returns its parameters; it is only flagged.
    """
    ctx = PhaseContext(original, ds, splits)
    params = original
    start = time.perf_counter()
    for i, phase in enumerate(spec.phases):
        params = apply_phase(phase, params, original, splits, ds, derive_seed(seed, "phase", i), ctx)
    if params is original:
        params = original.copy()
    elapsed = time.perf_counter() - start
    over = budget is not None and budget.exceeded(elapsed)
    if over:
        log.warning("%s took %.3fs, over the %.3fs budget", spec.name, elapsed, budget.limit_seconds)
    return PipelineRun(params, elapsed, over)


def stitch(erase_from: PipelineSpec, repair_from: PipelineSpec) -> PipelineSpec:
    """Erase phases of one pipeline followed by the repair phases of another."""
    erase = [p for p in erase_from.phases if p.role == "erase"]
    repair = [p for p in repair_from.phases if p.role == "repair"]
    if not erase:
        raise ValueError(f"{erase_from.name!r} has no erase phases")
    if not repair:
        raise ValueError(f"{repair_from.name!r} has no repair phases")
    hp = {"erase_from": erase_from.name, "repair_from": repair_from.name}
    return PipelineSpec(f"{erase_from.name}+{repair_from.name}", tuple(erase + repair), hp)
