"""Declarative experiment configs: YAML files plus dotted-path overrides.

A config is a nested mapping with a ``version`` key. Every section has
defaults, so a file only lists what it changes; unknown keys are errors.
``--override epsilon.delta=0.01`` style overrides are parsed as YAML scalars
and applied after the file is loaded.
"""
from __future__ import annotations

import copy
import dataclasses
from pathlib import Path

import yaml

from forgetbench.attack import EpsilonConfig
from forgetbench.harness.experiment import ExperimentConfig, Setup
from forgetbench.harness.problem import ProblemConfig
from forgetbench.scoring import BinningConfig
from forgetbench.train import TrainConfig
from forgetbench.unlearn import PipelineSpec, make_preset

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _dc_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        v = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "problem": _dc_defaults(ProblemConfig),
        "train": _dc_defaults(TrainConfig),
        "epsilon": _dc_defaults(EpsilonConfig),
        "binning": _dc_defaults(BinningConfig),
        "experiment": {
            "n_models": 64,
            "n_experiments": 5,
            "setup": "REUSE_N_N",
            "pool_size": None,
            "base_seed": 0,
            "budget_fraction": 0.2,
            "mia_models": 4,
            "workers": 1,
            "level": 0.95,
        },
        "unlearn": {"algorithms": ["finetune"], "overrides": {}, "pipeline": None},
        "store": None,
        "output": "report.json",
    }


# sections whose keys are free-form (not validated against the defaults)
_OPEN = {("unlearn", "overrides"), ("unlearn", "pipeline")}


def _merge(base: dict, update: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = ".".join(path + (str(key),))
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and (path + (key,)) not in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(out[key], value, path + (key,))
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, override: str) -> dict:
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not key=value")
    key, raw = override.split("=", 1)
    parts = key.strip().split(".")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
    update = value
    for p in reversed(parts):
        update = {p: update}
    return _merge(cfg, update)


def resolve(file_values: dict | None = None, overrides=()) -> dict:
    raw = dict(file_values or {})
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    cfg = _merge(default_config(), raw)
    for o in overrides:
        cfg = apply_override(cfg, o)
    return cfg


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        values = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = resolve(values, overrides)
    pipeline = cfg["unlearn"]["pipeline"]
    if isinstance(pipeline, str):
        p = Path(pipeline)
        if not p.is_absolute():
            p = path.parent / p
        cfg["unlearn"]["pipeline"] = yaml.safe_load(p.read_text())
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)


def _build(cls, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def experiment_config(cfg: dict, pipeline: PipelineSpec | None = None) -> ExperimentConfig:
    ex = cfg["experiment"]
    try:
        return ExperimentConfig(
            n_models=ex["n_models"],
            n_experiments=ex["n_experiments"],
            setup=Setup(ex["setup"]),
            pool_size=ex["pool_size"],
            base_seed=ex["base_seed"],
            epsilon=_build(EpsilonConfig, cfg["epsilon"]),
            binning=_build(BinningConfig, cfg["binning"]),
            train=_build(TrainConfig, cfg["train"]),
            pipeline=pipeline,
            problem=_build(ProblemConfig, cfg["problem"]),
            budget_fraction=ex["budget_fraction"],
            mia_models=ex["mia_models"],
            workers=ex["workers"],
            level=ex["level"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def pipelines(cfg: dict) -> list[PipelineSpec]:
    """The pipelines an evaluate run covers: named presets, then an inline one."""
    train = _build(TrainConfig, cfg["train"])
    un = cfg["unlearn"]
    out = [make_preset(name, (un.get("overrides") or {}).get(name), train_cfg=train) for name in un["algorithms"]]
    if un.get("pipeline"):
        out.append(PipelineSpec.from_dict(un["pipeline"]))
    if not out:
        raise ConfigError("no algorithms to run (unlearn.algorithms is empty and no pipeline given)")
    return out
