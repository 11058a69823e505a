"""Small fixed-family MLP with hand-written backprop.

Everything model-side runs in the dtype of the parameter arrays (float32 for
trained models). Loss heads upcast logits to float64 before reducing, so the
loss value and the logit-gradient are accumulated in double precision and then
cast back for the backward pass through the layers. Casting a model to float64
(``params.astype(np.float64)``) gives a fully double-precision path, which is
what the finite-difference checks use.
"""
from __future__ import annotations

import dataclasses
import enum
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_CLAMP = 1e-9

CHECKPOINT_MAGIC = b"UNLM"
CHECKPOINT_VERSION = 1


class NumericalError(ArithmeticError):
    """Raised when a loss becomes NaN or infinite."""


@dataclasses.dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def weight_shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]


@dataclasses.dataclass(eq=False)
class ModelParams:
    """Per-layer weights (out x in) and biases. Also used for gradients and
    momentum buffers, which share the same shapes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and of equal length")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: inconsistent shapes {w.shape} / {b.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {w.shape[1]} does not chain")

    @property
    def arch(self) -> Architecture:
        return Architecture((self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def map(self, fn) -> "ModelParams":
        return ModelParams.from_arrays([fn(a) for a in self.arrays()])

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def astype(self, dtype) -> "ModelParams":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "ModelParams") -> bool:
        """Bit-level equality (same shapes, dtypes and values)."""
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(mine, theirs)
        )


OptimizerState = ModelParams


@dataclasses.dataclass(frozen=True, eq=False)
class ClassWeights:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not len(v) or (v <= 0).any():
            raise ValueError("class weights must be a non-empty vector of positive reals")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def init_bound(fan_in: int) -> float:
    return float(np.sqrt(6.0 / fan_in))


def init_params(arch: Architecture, seed) -> ModelParams:
    """He-uniform weights, zero biases, float32. Deterministic in (arch, seed)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in arch.weight_shapes():
        bound = init_bound(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(np.float32))
        biases.append(np.zeros(out_dim, dtype=np.float32))
    return ModelParams(weights, biases)


def _as_batch(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input has shape {x.shape}, expected (*, {params.weights[0].shape[1]})")
    return x


def _forward_cached(params: ModelParams, x: np.ndarray):
    acts = [x]
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if l < last:
            h = np.maximum(z, 0)
            acts.append(h)
        else:
            h = z
    return h, acts


def forward(params: ModelParams, x) -> np.ndarray:
    """Logits for one feature vector (returns shape (K,)) or a batch (B, K)."""
    single = np.ndim(x) == 1
    logits, _ = _forward_cached(params, _as_batch(params, x))
    return logits[0] if single else logits


def _backward(params: ModelParams, acts, dlogits: np.ndarray) -> ModelParams:
    weights, biases = [None] * params.n_layers, [None] * params.n_layers
    delta = dlogits.astype(params.dtype, copy=False)
    for l in range(params.n_layers - 1, -1, -1):
        weights[l] = delta.T @ acts[l]
        biases[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ params.weights[l]) * (acts[l] > 0)
    return ModelParams(weights, biases)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def prediction_entropy(probs) -> float | np.ndarray:
    """Shannon entropy (nats) along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


def confidence_correct(params: ModelParams, x, label) -> float | np.ndarray:
    """Clamped softmax probability of the true class. Vectorizes over batches."""
    single = np.ndim(x) == 1
    logits = forward(params, x if not single else np.asarray(x)[None, :])
    probs = softmax(logits.astype(np.float64))
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"label out of range [0, {probs.shape[1]})")
    p = np.clip(probs[np.arange(len(labels)), labels], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(p[0]) if single else p


def logit_scale(p) -> float | np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- losses


class LossKind(str, enum.Enum):
    CE = "CE"
    CE_ENTROPY_MSE = "CE_ENTROPY_MSE"
    CE_SYM_KL = "CE_SYM_KL"
    KL_DISTILL = "KL_DISTILL"
    MSE_DISTILL = "MSE_DISTILL"
    UNIFORM_KL = "UNIFORM_KL"
    CONTRASTIVE = "CONTRASTIVE"
    NEGGRAD_PLUS = "NEGGRAD_PLUS"
    L1_CE = "L1_CE"


_REQUIRED = {
    LossKind.NEGGRAD_PLUS: {"alpha"},
    LossKind.L1_CE: {"l1_weight"},
    LossKind.KL_DISTILL: {"temperature"},
    LossKind.CONTRASTIVE: {"temperature"},
}
_OPTIONAL = {LossKind.KL_DISTILL: {"ce_weight"}}
_NEEDS_REFERENCE = {
    LossKind.CE_ENTROPY_MSE,
    LossKind.CE_SYM_KL,
    LossKind.KL_DISTILL,
    LossKind.MSE_DISTILL,
}
_NEEDS_AUX = {LossKind.NEGGRAD_PLUS, LossKind.CONTRASTIVE}
_VARIANT_FIELDS = ("alpha", "l1_weight", "temperature", "ce_weight")


@dataclasses.dataclass(frozen=True, eq=False)
class LossSpec:
    """Which objective to optimize and its knobs.

    ``reference`` is the frozen model distillation-style losses compare
    against; phases leave it unset and the unlearning engine binds the
    original model at run time. ``ascent`` flips the sign (maximize).
    """

    kind: LossKind
    alpha: float | None = None
    l1_weight: float | None = None
    temperature: float | None = None
    ce_weight: float | None = None
    reference: ModelParams | None = None
    ascent: bool = False

    def __post_init__(self):
        kind = LossKind(self.kind)
        object.__setattr__(self, "kind", kind)
        required = _REQUIRED.get(kind, set())
        allowed = required | _OPTIONAL.get(kind, set())
        for name in _VARIANT_FIELDS:
            value = getattr(self, name)
            if name in required and value is None:
                raise ValueError(f"{kind.value} requires {name}")
            if name not in allowed and value is not None:
                raise ValueError(f"{kind.value} does not take {name}")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.l1_weight is not None and self.l1_weight < 0:
            raise ValueError("l1_weight must be non-negative")

    def _key(self):
        # knobs compare by value, a bound reference model by identity
        return tuple(sorted(self.to_dict().items())), id(self.reference)

    def __eq__(self, other):
        if not isinstance(other, LossSpec):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def needs_reference(self) -> bool:
        return self.kind in _NEEDS_REFERENCE

    @property
    def needs_aux(self) -> bool:
        return self.kind in _NEEDS_AUX

    def with_reference(self, reference: ModelParams) -> "LossSpec":
        return dataclasses.replace(self, reference=reference)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for name in _VARIANT_FIELDS:
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.ascent:
            out["ascent"] = True
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(**d)


@dataclasses.dataclass
class Batch:
    """Primary examples plus an optional auxiliary batch.

    NEGGRAD_PLUS reads the retain examples from ``x``/``y`` and the forget
    examples from ``aux_x``/``aux_y``; CONTRASTIVE reads forget examples from
    ``x`` and retain examples from ``aux_x``. ``sample_weight`` scales each
    primary example's cross-entropy term.
    """

    x: np.ndarray
    y: np.ndarray
    aux_x: np.ndarray | None = None
    aux_y: np.ndarray | None = None
    sample_weight: np.ndarray | None = None

    @classmethod
    def from_pairs(cls, pairs) -> "Batch":
        xs, ys = zip(*pairs)
        return cls(np.stack([np.asarray(x) for x in xs]), np.asarray(ys, dtype=np.int64))


def _class_weight_vector(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.ones(k)
    w = np.asarray(getattr(weights, "values", weights), dtype=np.float64)
    if w.shape != (k,):
        raise ValueError(f"class weights have shape {w.shape}, expected ({k},)")
    return w


def _weighted_ce(z, y, cw, sw=None):
    """PyTorch-style class-weighted mean CE: sum(c_i s_i l_i) / sum(c_i)."""
    logp = log_softmax(z)
    idx = np.arange(len(y))
    c = cw[y]
    s = c if sw is None else c * sw
    denom = c.sum()
    loss = float((s * -logp[idx, y]).sum() / denom)
    dz = np.exp(logp)
    dz[idx, y] -= 1.0
    dz *= (s / denom)[:, None]
    return loss, dz


def _kl_and_grad(p, logp, logq):
    """KL(p || q) per row, and its gradient w.r.t. the logits producing p."""
    kl = (p * (logp - logq)).sum(axis=1)
    return kl, p * (logp - logq - kl[:, None])


def _entropy_grad(p, logp):
    h = -(p * logp).sum(axis=1)
    return h, -p * (logp + h[:, None])


def _softmax_backward(p, dp):
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


def loss_and_grad(params: ModelParams, batch: Batch, spec: LossSpec, weights=None):
    """Mean loss over the batch and its exact gradient w.r.t. every parameter.

    ``weights`` is a ClassWeights (or plain length-K array); None means uniform.
    """
    kind = spec.kind
    x = _as_batch(params, batch.x)
    y = np.asarray(batch.y, dtype=np.int64)
    if len(x) == 0 or len(y) != len(x):
        raise ValueError("batch must be non-empty with one label per example")
    if spec.needs_reference and spec.reference is None:
        raise ValueError(f"{kind.value} needs a reference model")
    if spec.needs_aux and (batch.aux_x is None or len(batch.aux_x) == 0):
        raise ValueError(f"{kind.value} needs an auxiliary batch")

    logits, acts = _forward_cached(params, x)
    z = logits.astype(np.float64)
    k = z.shape[1]
    cw = _class_weight_vector(weights, k)
    sw = None if batch.sample_weight is None else np.asarray(batch.sample_weight, dtype=np.float64)
    aux_dz = None
    aux_acts = None

    if kind in (LossKind.CE, LossKind.L1_CE):
        loss, dz = _weighted_ce(z, y, cw, sw)
    elif kind is LossKind.NEGGRAD_PLUS:
        alpha = spec.alpha
        loss, dz = _weighted_ce(z, y, cw, sw)
        loss, dz = alpha * loss, alpha * dz
        if alpha < 1.0:
            aux_logits, aux_acts = _forward_cached(params, _as_batch(params, batch.aux_x))
            f_loss, aux_dz = _weighted_ce(
                aux_logits.astype(np.float64), np.asarray(batch.aux_y, dtype=np.int64), cw
            )
            loss -= (1.0 - alpha) * f_loss
            aux_dz = -(1.0 - alpha) * aux_dz
    elif kind is LossKind.UNIFORM_KL:
        logp = log_softmax(z)
        p = np.exp(logp)
        kl, g = _kl_and_grad(p, logp, np.full_like(logp, -np.log(k)))
        loss, dz = float(kl.mean()), g / len(z)
    elif kind is LossKind.CONTRASTIVE:
        aux_logits, aux_acts = _forward_cached(params, _as_batch(params, batch.aux_x))
        pf = softmax(z)
        pr = softmax(aux_logits.astype(np.float64))
        t = spec.temperature
        s = pf @ pr.T / t
        m, mr = s.shape
        logq = log_softmax(s)
        loss = float(-logq.mean())
        ds = (np.exp(logq) - 1.0 / mr) / m
        dz = _softmax_backward(pf, ds @ pr / t)
        aux_dz = _softmax_backward(pr, ds.T @ pf / t)
    else:
        ref = spec.reference.astype(np.float64) if spec.reference.dtype != np.float64 else spec.reference
        z0 = forward(ref, x.astype(np.float64))
        b = len(z)
        if kind is LossKind.MSE_DISTILL:
            diff = z - z0
            loss = float((diff**2).mean())
            dz = 2.0 * diff / diff.size
        elif kind is LossKind.KL_DISTILL:
            t = spec.temperature
            logp = log_softmax(z / t)
            logq = log_softmax(z0 / t)
            q = np.exp(logq)
            loss = float((q * (logq - logp)).sum(axis=1).mean())
            dz = (np.exp(logp) - q) / (t * b)
            if spec.ce_weight:
                ce, dce = _weighted_ce(z, y, cw, sw)
                loss += spec.ce_weight * ce
                dz += spec.ce_weight * dce
        else:
            loss, dz = _weighted_ce(z, y, cw, sw)
            logp = log_softmax(z)
            p = np.exp(logp)
            logq = log_softmax(z0)
            if kind is LossKind.CE_ENTROPY_MSE:
                h, dh = _entropy_grad(p, logp)
                h0 = -(np.exp(logq) * logq).sum(axis=1)
                loss += float(((h - h0) ** 2).mean())
                dz = dz + (2.0 * (h - h0) / b)[:, None] * dh
            elif kind is LossKind.CE_SYM_KL:
                q = np.exp(logq)
                kl_pq, g_pq = _kl_and_grad(p, logp, logq)
                kl_qp = (q * (logq - logp)).sum(axis=1)
                loss += float((kl_pq + kl_qp).mean())
                dz = dz + (g_pq + (p - q)) / b
            else:  # pragma: no cover - enum is exhaustive
                raise ValueError(f"unknown loss {kind}")

    grads = _backward(params, acts, dz)
    if aux_dz is not None:
        aux_grads = _backward(params, aux_acts, aux_dz)
        grads = ModelParams.from_arrays([a + b for a, b in zip(grads.arrays(), aux_grads.arrays())])
    if kind is LossKind.L1_CE and spec.l1_weight:
        lam = spec.l1_weight
        loss += lam * float(sum(np.abs(a).sum(dtype=np.float64) for a in params.arrays()))
        grads = ModelParams.from_arrays(
            [g + (lam * np.sign(a)).astype(a.dtype) for g, a in zip(grads.arrays(), params.arrays())]
        )
    if spec.ascent:
        loss = -loss
        grads = grads.map(np.negative)
    if not np.isfinite(loss):
        raise NumericalError(f"{kind.value} loss is not finite ({loss})")
    return loss, grads


def sgd_momentum_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
    lr_scale: ModelParams | None = None,
    mask: ModelParams | None = None,
):
    """One heavy-ball SGD step (PyTorch convention); returns (params, state).

    ``lr_scale`` multiplies the step per parameter; where ``mask`` is false
    the parameter is left untouched.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if weight_decay < 0:
        raise ValueError("weight_decay must be non-negative")
    new_p, new_v = [], []
    scales = lr_scale.arrays() if lr_scale is not None else [None] * len(params.arrays())
    masks = mask.arrays() if mask is not None else [None] * len(params.arrays())
    for theta, g, v, sc, m in zip(params.arrays(), grads.arrays(), state.arrays(), scales, masks):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise ValueError(f"shape mismatch {theta.shape} / {g.shape} / {v.shape}")
        d = g + weight_decay * theta if weight_decay else g
        v = momentum * v + d
        step = lr * v if sc is None else lr * sc * v
        updated = (theta - step).astype(theta.dtype, copy=False)
        if m is not None:
            updated = np.where(m, updated, theta)
        new_p.append(updated)
        new_v.append(v.astype(theta.dtype, copy=False))
    return ModelParams.from_arrays(new_p), ModelParams.from_arrays(new_v)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the binary checkpoint atomically (tmp file + rename)."""
    path = Path(path)
    sizes = params.arch.layer_sizes
    header = CHECKPOINT_MAGIC + struct.pack(f"<II{len(sizes)}I", CHECKPOINT_VERSION, len(sizes), *sizes)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{count}I", raw, 12)
    offset = 12 + 4 * count
    arch = Architecture(sizes)
    arrays = []
    for shape in arch.weight_shapes():
        for shp in (shape, (shape[0],)):
            n = int(np.prod(shp))
            arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shp).astype(np.float32))
            offset += 4 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return ModelParams.from_arrays(arrays)
