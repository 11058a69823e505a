"""Erase/repair building blocks and the code that applies them.

Layer indices follow the network: ``0 .. L-2`` are hidden layers and ``L-1``
(or ``-1``) is the output layer. Selectors that talk about "convolutional"
parameters in the original recipes act on hidden-layer weights here.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import ClassVar, Union

import numpy as np

from forgetbench import nn_core
from forgetbench.data import Dataset, Splits, class_weights, majority_class
from forgetbench.nn_core import Batch, LossKind, LossSpec, ModelParams
from forgetbench.train import minibatches

log = logging.getLogger(__name__)

ROLES = ("erase", "repair")
SOURCES = ("retain", "forget", "val", "noisy_retain")
SELECTORS = ("weight_l1_bottom", "grad_l1_bottom", "random_layers", "named_layers")
SCOPES = ("weights", "hidden_weights", "all")
SEIF_MAJORITY_WEIGHT = 1.0
SEIF_MINORITY_WEIGHT = 0.05


def _check_role(role):
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")


@dataclasses.dataclass(frozen=True)
class Reinit:
    kind: ClassVar[str] = "REINIT"
    selector: str
    frac: float | None = None
    probe: LossSpec | None = None
    count: int | None = None
    layers: tuple[int, ...] | None = None
    scope: str = "weights"
    role: str = "erase"

    def __post_init__(self):
        _check_role(self.role)
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.selector in ("weight_l1_bottom", "grad_l1_bottom"):
            if self.frac is None or not 0.0 <= self.frac <= 1.0:
                raise ValueError("frac must lie in [0, 1]")
        if self.selector == "grad_l1_bottom" and self.probe is None:
            raise ValueError("grad_l1_bottom needs a probe loss")
        if self.selector == "random_layers" and (self.count is None or self.count < 1):
            raise ValueError("random_layers needs count >= 1")
        if self.selector == "named_layers":
            if not self.layers:
                raise ValueError("named_layers needs at least one layer id")
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))


@dataclasses.dataclass(frozen=True)
class Noise:
    """Additive Gaussian noise on the weights of a set of layers.

    ``layers`` is ``"hidden"``, ``"output"``, ``"all"``, ``"random_subset"``
    (each layer kept with probability ``subset_prob``, at least one) or a
    tuple of layer ids.
    """

    kind: ClassVar[str] = "NOISE"
    sigma: float
    layers: Union[str, tuple[int, ...]] = "hidden"
    include_biases: bool = False
    subset_prob: float = 0.5
    role: str = "erase"

    def __post_init__(self):
        _check_role(self.role)
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if isinstance(self.layers, str):
            if self.layers not in ("hidden", "output", "all", "random_subset"):
                raise ValueError(f"unknown layer policy {self.layers!r}")
        else:
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))


@dataclasses.dataclass(frozen=True)
class Descent:
    """Mini-batch SGD on one loss over one data source.

    lr_multipliers=(reinit, other) scales the step of hidden-layer parameters
    that an earlier REINIT touched vs. the rest of the hidden parameters.
    train_layers="noised" restricts updates to the layers the most recent
    NOISE phase hit. mask_threshold turns on a SalUn saliency mask.
    """

    kind: ClassVar[str] = "DESCENT"
    loss: LossSpec
    source: str = "retain"
    epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    class_weighted: bool = True
    class_weights_from: str = "train"
    lr_multipliers: tuple[float, float] | None = None
    reweight_majority: bool = False
    random_labels: bool = False
    mask_threshold: float | None = None
    aux_source: str | None = None
    train_layers: str = "all"
    noise_x: float = 0.1
    role: str = "repair"

    def __post_init__(self):
        _check_role(self.role)
        if self.source not in SOURCES or (self.aux_source is not None and self.aux_source not in SOURCES):
            raise ValueError(f"data sources must be among {SOURCES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")
        if self.loss.needs_aux and self.aux_source is None:
            raise ValueError(f"{self.loss.kind.value} needs an aux_source")
        if self.mask_threshold is not None and not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask_threshold must lie in (0, 1)")
        if self.class_weights_from not in ("train", "source"):
            raise ValueError("class_weights_from is 'train' or 'source'")
        if self.train_layers not in ("all", "noised"):
            raise ValueError("train_layers is 'all' or 'noised'")
        if self.lr_multipliers is not None:
            object.__setattr__(self, "lr_multipliers", tuple(float(m) for m in self.lr_multipliers))


@dataclasses.dataclass(frozen=True)
class AscentDescent:
    """Joint descent on retain batches and ascent on paired forget batches
    (NEGGRAD_PLUS), forget batches cycled to match the retain epoch."""

    kind: ClassVar[str] = "ASCENT_DESCENT"
    loss: LossSpec
    epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    forget_batch_size: int = 16
    class_weighted: bool = True
    role: str = "erase"

    def __post_init__(self):
        _check_role(self.role)
        if self.loss.kind is not LossKind.NEGGRAD_PLUS:
            raise ValueError("ASCENT_DESCENT takes a NEGGRAD_PLUS loss")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr positive")


Phase = Union[Reinit, Noise, Descent, AscentDescent]
PHASE_TYPES = {cls.kind: cls for cls in (Reinit, Noise, Descent, AscentDescent)}


@dataclasses.dataclass
class PhaseContext:
    """State threaded between the phases of one pipeline run."""

    original: ModelParams
    ds: Dataset
    splits: Splits
    reinit_mask: ModelParams | None = None
    noised_layers: tuple[int, ...] = ()
    _weights: nn_core.ClassWeights | None = None
    _majority: int | None = None

    @property
    def train_weights(self) -> nn_core.ClassWeights:
        if self._weights is None:
            self._weights = class_weights(self.ds, self.splits.train)
        return self._weights

    @property
    def majority(self) -> int:
        if self._majority is None:
            self._majority = majority_class(self.ds, self.splits.train)
        return self._majority

    def indices(self, source: str) -> np.ndarray:
        name = "retain" if source == "noisy_retain" else source
        idx = getattr(self.splits, name)
        if idx is None or not len(idx):
            raise ValueError(f"split {name!r} is empty or missing")
        return np.asarray(idx)


# ------------------------------------------------------------------ selection


def _layer_ids(n_layers: int, ids) -> list[int]:
    out = []
    for i in ids:
        j = i + n_layers if i < 0 else i
        if not 0 <= j < n_layers:
            raise ValueError(f"layer id {i} out of range for {n_layers} layers")
        out.append(j)
    return sorted(set(out))


def _scope_arrays(params: ModelParams, scope: str) -> list[bool]:
    """Which entries of params.arrays() a selector may touch."""
    hidden = set(range(params.n_layers - 1))
    flags = []
    for l in range(params.n_layers):
        flags.append(scope == "all" or scope == "weights" or (scope == "hidden_weights" and l in hidden))
        flags.append(scope == "all")
    return flags


def select_bottom(scores: ModelParams, frac: float, scope: str = "weights") -> ModelParams:
    """Boolean mask of the ``floor(frac * n)`` in-scope entries with the
    smallest |score| (stable on ties)."""
    flags = _scope_arrays(scores, scope)
    pool = np.concatenate([np.abs(a).ravel() for a, f in zip(scores.arrays(), flags) if f])
    k = int(np.floor(frac * len(pool) + 1e-9))
    if frac > 0 and k == 0:
        raise ValueError(f"fraction {frac} selects no parameters out of {len(pool)}")
    chosen = np.zeros(len(pool), dtype=bool)
    chosen[np.argsort(pool, kind="stable")[:k]] = True
    return _unflatten_mask(scores, chosen, flags)


def select_top(scores: ModelParams, frac: float, scope: str = "all") -> ModelParams:
    flags = _scope_arrays(scores, scope)
    pool = np.concatenate([np.abs(a).ravel() for a, f in zip(scores.arrays(), flags) if f])
    k = int(np.floor(frac * len(pool) + 1e-9))
    chosen = np.zeros(len(pool), dtype=bool)
    chosen[np.argsort(-pool, kind="stable")[:k]] = True
    return _unflatten_mask(scores, chosen, flags)


def _unflatten_mask(like: ModelParams, chosen: np.ndarray, flags) -> ModelParams:
    out, pos = [], 0
    for a, f in zip(like.arrays(), flags):
        if f:
            out.append(chosen[pos : pos + a.size].reshape(a.shape))
            pos += a.size
        else:
            out.append(np.zeros(a.shape, dtype=bool))
    return ModelParams.from_arrays(out)


def _layer_mask(params: ModelParams, layers, include_biases: bool = True) -> ModelParams:
    out = []
    for l in range(params.n_layers):
        on = l in layers
        out.append(np.full(params.weights[l].shape, on))
        out.append(np.full(params.biases[l].shape, on and include_biases))
    return ModelParams.from_arrays(out)


def _full_batch(ctx: PhaseContext, source: str, rng=None) -> tuple[np.ndarray, np.ndarray]:
    idx = ctx.indices(source)
    return ctx.ds.features[idx], ctx.ds.labels[idx]


def salun_mask(original: ModelParams, splits: Splits, ds: Dataset, threshold: float) -> ModelParams:
    """Saliency mask: the top ``threshold`` fraction of parameters by the
    magnitude of a gradient-ascent step on the forget set, taken at the
    original model."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    idx = np.asarray(splits.forget)
    _, g = nn_core.loss_and_grad(
        original, Batch(ds.features[idx], ds.labels[idx]), LossSpec("CE", ascent=True), class_weights_or_none(ds, splits)
    )
    return select_top(g, threshold, scope="all")


def class_weights_or_none(ds: Dataset, splits: Splits):
    try:
        return class_weights(ds, splits.train)
    except ValueError:
        return None


# ------------------------------------------------------------------ application


def _redraw(params: ModelParams, mask: ModelParams, rng: np.random.Generator) -> ModelParams:
    out = []
    for l in range(params.n_layers):
        w, b = params.weights[l], params.biases[l]
        mw, mb = mask.weights[l], mask.biases[l]
        bound = nn_core.init_bound(w.shape[1])
        fresh = rng.uniform(-bound, bound, size=w.shape).astype(w.dtype)
        out.append(np.where(mw, fresh, w))
        out.append(np.where(mb, np.zeros_like(b), b))
    return ModelParams.from_arrays(out)


def _apply_reinit(phase: Reinit, params: ModelParams, ctx: PhaseContext, rng) -> ModelParams:
    n = params.n_layers
    if phase.selector == "weight_l1_bottom":
        if phase.frac == 0:
            return params.copy()
        mask = select_bottom(params, phase.frac, phase.scope)
    elif phase.selector == "grad_l1_bottom":
        if phase.frac == 0:
            return params.copy()
        xr, yr = _full_batch(ctx, "retain")
        xf, yf = _full_batch(ctx, "forget")
        _, g = nn_core.loss_and_grad(params, Batch(xr, yr, xf, yf), phase.probe, ctx.train_weights)
        mask = select_bottom(g, phase.frac, phase.scope)
    elif phase.selector == "random_layers":
        count = min(phase.count, n)
        mask = _layer_mask(params, set(rng.choice(n, size=count, replace=False).tolist()))
    else:
        mask = _layer_mask(params, set(_layer_ids(n, phase.layers)))
    ctx.reinit_mask = mask if ctx.reinit_mask is None else ModelParams.from_arrays(
        [a | b for a, b in zip(ctx.reinit_mask.arrays(), mask.arrays())]
    )
    return _redraw(params, mask, rng)


def _noise_layers(phase: Noise, n: int, rng) -> list[int]:
    if not isinstance(phase.layers, str):
        return _layer_ids(n, phase.layers)
    if phase.layers == "hidden":
        return list(range(n - 1)) or [0]
    if phase.layers == "output":
        return [n - 1]
    if phase.layers == "all":
        return list(range(n))
    picked = [l for l in range(n) if rng.random() < phase.subset_prob]
    return picked or [int(rng.integers(n))]


def _apply_noise(phase: Noise, params: ModelParams, ctx: PhaseContext, rng) -> ModelParams:
    layers = _noise_layers(phase, params.n_layers, rng)
    ctx.noised_layers = tuple(layers)
    if phase.sigma == 0:
        return params.copy()
    out = params.copy()
    for l in layers:
        w = out.weights[l]
        out.weights[l] = (w + rng.normal(0.0, phase.sigma, size=w.shape)).astype(w.dtype)
        if phase.include_biases:
            b = out.biases[l]
            out.biases[l] = (b + rng.normal(0.0, phase.sigma, size=b.shape)).astype(b.dtype)
    return out


def _lr_scale(params: ModelParams, ctx: PhaseContext, multipliers) -> ModelParams:
    reinit_m, other_m = multipliers
    hidden = set(range(params.n_layers - 1))
    rmask = ctx.reinit_mask.arrays() if ctx.reinit_mask is not None else [None] * len(params.arrays())
    out = []
    for i, a in enumerate(params.arrays()):
        if i // 2 in hidden:
            m = rmask[i] if rmask[i] is not None else np.zeros(a.shape, dtype=bool)
            out.append(np.where(m, reinit_m, other_m).astype(a.dtype))
        else:
            out.append(np.ones(a.shape, dtype=a.dtype))
    return ModelParams.from_arrays(out)


def _combine_masks(a: ModelParams | None, b: ModelParams | None) -> ModelParams | None:
    if a is None:
        return b
    if b is None:
        return a
    return ModelParams.from_arrays([x & y for x, y in zip(a.arrays(), b.arrays())])


def _apply_descent(phase: Descent, params: ModelParams, ctx: PhaseContext, rng) -> ModelParams:
    if phase.epochs == 0:
        return params.copy()
    ds = ctx.ds
    idx = ctx.indices(phase.source)
    labels = ds.labels
    if phase.random_labels:
        k = ds.n_classes
        labels = labels.copy()
        labels[idx] = (labels[idx] + rng.integers(1, k, size=len(idx))) % k
    loss = phase.loss.with_reference(ctx.original) if phase.loss.needs_reference else phase.loss
    weights = None
    if phase.class_weighted:
        weights = ctx.train_weights if phase.class_weights_from == "train" else class_weights(ds, idx)
    aux_idx = ctx.indices(phase.aux_source) if phase.aux_source else None

    mask = salun_mask(ctx.original, ctx.splits, ds, phase.mask_threshold) if phase.mask_threshold else None
    if phase.train_layers == "noised":
        mask = _combine_masks(mask, _layer_mask(params, set(ctx.noised_layers)))
    scale = _lr_scale(params, ctx, phase.lr_multipliers) if phase.lr_multipliers else None

    state = params.zeros_like()
    for _ in range(phase.epochs):
        for b in minibatches(idx, phase.batch_size, rng):
            x = ds.features[b]
            if phase.source == "noisy_retain":
                x = (x + rng.normal(0.0, phase.noise_x, size=x.shape)).astype(x.dtype)
            batch = Batch(x, labels[b])
            if phase.reweight_majority:
                batch.sample_weight = np.where(labels[b] == ctx.majority, SEIF_MAJORITY_WEIGHT, SEIF_MINORITY_WEIGHT)
            if aux_idx is not None:
                a = rng.choice(aux_idx, size=min(len(b), len(aux_idx)), replace=False)
                batch.aux_x, batch.aux_y = ds.features[a], labels[a]
            _, grads = nn_core.loss_and_grad(params, batch, loss, weights)
            params, state = nn_core.sgd_momentum_step(
                params, grads, state, phase.lr, phase.momentum, phase.weight_decay, lr_scale=scale, mask=mask
            )
    return params


def _apply_ascent_descent(phase: AscentDescent, params: ModelParams, ctx: PhaseContext, rng) -> ModelParams:
    if phase.epochs == 0:
        return params.copy()
    ds = ctx.ds
    retain = ctx.indices("retain")
    forget = ctx.indices("forget")
    weights = ctx.train_weights if phase.class_weighted else None
    state = params.zeros_like()

    def forget_stream():
        while True:
            yield from minibatches(forget, phase.forget_batch_size, rng)

    fstream = forget_stream()
    for _ in range(phase.epochs):
        for b in minibatches(retain, phase.batch_size, rng):
            f = next(fstream)
            batch = Batch(ds.features[b], ds.labels[b], ds.features[f], ds.labels[f])
            _, grads = nn_core.loss_and_grad(params, batch, phase.loss, weights)
            params, state = nn_core.sgd_momentum_step(params, grads, state, phase.lr, phase.momentum, phase.weight_decay)
    return params


_APPLY = {
    Reinit: _apply_reinit,
    Noise: _apply_noise,
    Descent: _apply_descent,
    AscentDescent: _apply_ascent_descent,
}


def apply_phase(
    phase: Phase,
    params: ModelParams,
    original: ModelParams,
    splits: Splits,
    ds: Dataset,
    seed,
    ctx: PhaseContext | None = None,
) -> ModelParams:
    """Apply one phase; returns new params (inputs are never modified)."""
    if ctx is None:
        ctx = PhaseContext(original, ds, splits)
    out = _APPLY[type(phase)](phase, params, ctx, np.random.default_rng(seed))
    if not out.is_finite():
        raise nn_core.NumericalError(f"{phase.kind} phase produced non-finite parameters")
    return out


# ------------------------------------------------------------------ serialization


def phase_to_dict(phase: Phase) -> dict:
    out = {"type": phase.kind}
    for f in dataclasses.fields(phase):
        v = getattr(phase, f.name)
        default = f.default if f.default is not dataclasses.MISSING else object()
        if v == default and f.name not in ("role",):
            continue
        if isinstance(v, LossSpec):
            v = v.to_dict()
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def phase_from_dict(d: dict) -> Phase:
    d = dict(d)
    kind = d.pop("type")
    try:
        cls = PHASE_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown phase type {kind!r}") from None
    for key in ("loss", "probe"):
        if isinstance(d.get(key), dict):
            d[key] = LossSpec.from_dict(d[key])
    for key in ("layers", "lr_multipliers"):
        if isinstance(d.get(key), list):
            d[key] = tuple(d[key])
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"{kind} phase does not take {sorted(unknown)}")
    return cls(**d)
