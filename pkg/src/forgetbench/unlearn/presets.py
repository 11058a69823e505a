"""The thirteen analysed unlearning algorithms, plus two reference pipelines.

Every preset is a plain phase list built from the frozen defaults in
``defaults.yaml``; ``overrides`` replaces individual values per preset.
"""
from __future__ import annotations

import functools
from importlib import resources

import yaml

from forgetbench.nn_core import LossSpec
from forgetbench.train import TrainConfig
from forgetbench.unlearn.phases import AscentDescent, Descent, Noise, Reinit
from forgetbench.unlearn.pipeline import PipelineSpec

DEFAULTS_VERSION = 2

ALGORITHMS = (
    "finetune",
    "neggrad_plus",
    "scrub",
    "random_label",
    "salun",
    "l1_sparse",
    "fanchuan",
    "kookmin",
    "seif",
    "sebastian",
    "amnesiacs",
    "sun",
    "forget",
)
REFERENCES = ("identity", "retrain")

CE = LossSpec("CE")


@functools.lru_cache(maxsize=1)
def load_defaults() -> dict:
    text = resources.files("forgetbench").joinpath("defaults.yaml").read_text()
    d = yaml.safe_load(text)
    if d.get("version") != DEFAULTS_VERSION:
        raise ValueError(f"defaults.yaml version {d.get('version')} != {DEFAULTS_VERSION}")
    return d


def preset_names(include_references: bool = False) -> tuple[str, ...]:
    return ALGORITHMS + (REFERENCES if include_references else ())


def _retain_descent(loss, epochs, lr, common, role="repair", **kw):
    return Descent(
        loss,
        source=kw.pop("source", "retain"),
        epochs=epochs,
        lr=lr,
        momentum=common["momentum"],
        weight_decay=common["weight_decay"],
        batch_size=kw.pop("batch_size", common["batch_size"]),
        role=role,
        **kw,
    )


def _forget_descent(loss, epochs, lr, common, role="erase", **kw):
    return _retain_descent(loss, epochs, lr, common, role, source="forget", batch_size=common["forget_batch_size"], **kw)


def _finetune(h, c):
    return [_retain_descent(CE, h["epochs"], h["lr"], c)]


def _neggrad_plus(h, c):
    return [
        AscentDescent(
            LossSpec("NEGGRAD_PLUS", alpha=h["alpha"]),
            epochs=h["epochs"],
            lr=h["lr"],
            momentum=c["momentum"],
            weight_decay=c["weight_decay"],
            batch_size=c["batch_size"],
            forget_batch_size=c["forget_batch_size"],
        )
    ]


def _scrub(h, c):
    kl_max = LossSpec("KL_DISTILL", temperature=h["temperature"], ascent=True)
    kl_min = LossSpec("KL_DISTILL", temperature=h["temperature"], ce_weight=h["ce_weight"])
    phases = []
    for epoch in range(h["epochs"]):
        if epoch < h["max_steps"]:
            phases.append(_forget_descent(kl_max, 1, h["forget_lr"], c, class_weighted=False))
        phases.append(_retain_descent(kl_min, 1, h["retain_lr"], c))
    return phases


def _random_label(h, c, mask_threshold=None):
    return [
        _forget_descent(CE, h["erase_epochs"], h["erase_lr"], c, random_labels=True, mask_threshold=mask_threshold),
        _retain_descent(CE, h["repair_epochs"], h["repair_lr"], c),
    ]


def _salun(h, c):
    return _random_label(h, c, mask_threshold=h["threshold"])


def _l1_sparse(h, c):
    return [_retain_descent(LossSpec("L1_CE", l1_weight=h["l1_weight"]), h["epochs"], h["lr"], c)]


def _fanchuan(h, c):
    phases = [_forget_descent(LossSpec("UNIFORM_KL"), h["uniform_epochs"], h["uniform_lr"], c, class_weighted=False)]
    contrast = LossSpec("CONTRASTIVE", temperature=h["temperature"], ascent=True)
    for _ in range(h["cycles"]):
        phases.append(_forget_descent(contrast, 1, h["contrastive_lr"], c, aux_source="retain"))
        phases.append(_retain_descent(CE, 1, h["repair_lr"], c))
    return phases


def _kookmin(h, c):
    probe = LossSpec("NEGGRAD_PLUS", alpha=h["probe_alpha"])
    return [
        Reinit("grad_l1_bottom", frac=h["frac"], probe=probe, scope="hidden_weights"),
        _retain_descent(CE, h["epochs"], h["lr"], c, lr_multipliers=(h["reinit_multiplier"], h["other_multiplier"])),
    ]


def _seif(h, c):
    kw = dict(class_weighted=False, reweight_majority=True)
    return [
        Noise(h["sigma"], "hidden"),
        _retain_descent(CE, h["epochs"] - 1, h["lr"], c, **kw),
        Noise(h["final_sigma"], "hidden", role="repair"),
        _retain_descent(CE, 1, h["lr"], c, **kw),
    ]


def _sebastian(h, c):
    return [
        Reinit("weight_l1_bottom", frac=h["frac"], scope="weights"),
        _retain_descent(LossSpec("CE_ENTROPY_MSE"), h["epochs"], h["lr"], c),
    ]


def _amnesiacs(h, c):
    return [
        Reinit("named_layers", layers=(0, -1)),
        _retain_descent(
            LossSpec("KL_DISTILL", temperature=h["temperature"]), h["distill_epochs"], h["distill_lr"], c, source="val"
        ),
        _retain_descent(LossSpec("CE_SYM_KL"), h["retain_epochs"], h["retain_lr"], c),
    ]


def _sun(h, c):
    phases = [Reinit("named_layers", layers=(-1,))]
    for _ in range(h["noise_epochs"]):
        phases.append(Noise(h["sigma"], "random_subset"))
        phases.append(_retain_descent(CE, 1, h["lr"], c, train_layers="noised"))
    phases.append(_retain_descent(CE, h["final_epochs"], h["lr"], c))
    return phases


def _forget(h, c):
    phases = []
    for _ in range(h["cycles"]):
        phases.append(Reinit("random_layers", count=h["layers_per_cycle"]))
        phases.append(_retain_descent(LossSpec("MSE_DISTILL"), 1, h["lr"], c, source="noisy_retain", noise_x=h["noise_x"]))
    return phases


def _retrain_preset(cfg: TrainConfig) -> PipelineSpec:
    # frac=1 over every weight and bias is a full re-draw from the init distribution
    phases = (
        Reinit("weight_l1_bottom", frac=1.0, scope="all"),
        Descent(
            CE,
            epochs=cfg.epochs,
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
            class_weights_from="source",
        ),
    )
    return PipelineSpec("retrain", phases, {"epochs": cfg.epochs, "lr": cfg.lr})


_BUILDERS = {
    "finetune": _finetune,
    "neggrad_plus": _neggrad_plus,
    "scrub": _scrub,
    "random_label": _random_label,
    "salun": _salun,
    "l1_sparse": _l1_sparse,
    "fanchuan": _fanchuan,
    "kookmin": _kookmin,
    "seif": _seif,
    "sebastian": _sebastian,
    "amnesiacs": _amnesiacs,
    "sun": _sun,
    "forget": _forget,
}


def make_preset(name: str, overrides: dict | None = None, train_cfg: TrainConfig | None = None) -> PipelineSpec:
    """Build a named pipeline.

    ``identity`` returns the original model unchanged; ``retrain`` re-draws
    every parameter and trains on the retain set with ``train_cfg`` (the
    oracle, far over any budget).
    """
    defaults = load_defaults()
    common = dict(defaults["common"])
    if name == "identity":
        return PipelineSpec(name, (_retain_descent(CE, 0, 0.01, common),), {})
    if name == "retrain":
        return _retrain_preset(train_cfg or TrainConfig())
    if name not in _BUILDERS:
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(preset_names(True))}")
    hp = dict(defaults["presets"][name])
    for key, value in (overrides or {}).items():
        if key in common:
            common[key] = value
        elif key in hp:
            hp[key] = value
        else:
            raise ValueError(f"preset {name!r} has no hyperparameter {key!r}")
    return PipelineSpec(name, tuple(_BUILDERS[name](hp, common)), {**common, **hp})
