"""Trainable embedding head, margin losses and the two-stage trainer.

The head maps pooled backbone features to unit embeddings::

    features @ projection -> batch norm -> L2 normalize

Logits come in three flavours: ``"softmax"`` (plain linear classifier,
used for pre-training), ``"cosine"`` (scaled cosine to normalized class
rows) and ``"arcface"`` (cosine with an additive angular margin on the
target class).  Gradients are analytic and kept in float64.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ArcFaceParams, TrainConfig, derive_seed
from .core import ZERO_NORM
from .exceptions import (
    BatchTooSmallError,
    DimMismatchError,
    FormatError,
    InvalidTargetError,
    ZeroVectorError,
)

LOSS_KINDS = ("softmax", "cosine", "arcface")


@dataclass
class MetricHead:
    projection: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be positive")
        if np.any(self.bn_running_var < 0):
            raise ValueError("running variance must be non-negative")

    @property
    def in_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def initialize(cls, in_dim: int, dim: int = 512, seed=0, bn_momentum=0.1, bn_epsilon=1e-5):
        rng = np.random.default_rng(seed)
        return cls(
            projection=rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, dim)),
            bn_gamma=np.ones(dim),
            bn_beta=np.zeros(dim),
            bn_running_mean=np.zeros(dim),
            bn_running_var=np.ones(dim),
            bn_momentum=bn_momentum,
            bn_epsilon=bn_epsilon,
        )

    def copy(self) -> "MetricHead":
        return MetricHead(
            self.projection.copy(),
            self.bn_gamma.copy(),
            self.bn_beta.copy(),
            self.bn_running_mean.copy(),
            self.bn_running_var.copy(),
            self.bn_momentum,
            self.bn_epsilon,
        )


# --- forward ---------------------------------------------------------------


def _check_features(features, head: MetricHead) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != head.in_dim:
        raise DimMismatchError(f"features must be (batch, {head.in_dim}), got {X.shape}")
    return X


def _forward(X: np.ndarray, head: MetricHead, train: bool):
    Z = X @ head.projection
    if train:
        if len(X) < 2:
            raise BatchTooSmallError("train-mode batch norm needs at least 2 samples")
        mean = Z.mean(axis=0)
        var = Z.var(axis=0)
    else:
        mean, var = head.bn_running_mean, head.bn_running_var
    inv_std = 1.0 / np.sqrt(var + head.bn_epsilon)
    Zhat = (Z - mean) * inv_std
    Y = head.bn_gamma * Zhat + head.bn_beta
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM):
        raise ZeroVectorError("head produced a zero embedding")
    E = Y / norms
    cache = {"X": X, "Zhat": Zhat, "inv_std": inv_std, "norms": norms, "E": E, "mean": mean, "var": var}
    return E, cache


def head_forward(features, head: MetricHead, mode: str = "eval") -> np.ndarray:
    """Embed a batch.  In ``"train"`` mode the running BN statistics move."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = _check_features(features, head)
    E, cache = _forward(X, head, mode == "train")
    if mode == "train":
        _update_running(head, cache["mean"], cache["var"])
    return E


def _update_running(head: MetricHead, mean, var) -> None:
    m = head.bn_momentum
    head.bn_running_mean = (1 - m) * head.bn_running_mean + m * mean
    head.bn_running_var = (1 - m) * head.bn_running_var + m * var


# --- logits and losses -----------------------------------------------------


def _normalized_rows(weights: np.ndarray):
    W = np.asarray(weights, dtype=np.float64)
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM):
        raise ZeroVectorError("classifier has a zero row")
    return W / norms, norms


def cosine_logits(emb, weights) -> np.ndarray:
    """Cosine between ``emb`` (one vector or a batch) and each class row."""
    Wn, _ = _normalized_rows(weights)
    return np.clip(np.asarray(emb, dtype=np.float64) @ Wn.T, -1.0, 1.0)


def _check_targets(targets, n_classes: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.size and (not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= n_classes):
        raise InvalidTargetError(f"targets must be integers in [0, {n_classes})")
    return t.astype(np.int64)


def arcface_logits(emb, weights, target, params: ArcFaceParams = ArcFaceParams()) -> np.ndarray:
    """``s*cos(theta + m)`` for the target class, ``s*cos(theta)`` elsewhere.

    Accepts a single embedding with an int target, or a batch with a
    target array.
    """
    cos = cosine_logits(emb, weights)
    single = cos.ndim == 1
    cos2 = np.atleast_2d(cos)
    t = _check_targets(np.atleast_1d(target), cos2.shape[1])
    if len(t) != len(cos2):
        raise InvalidTargetError("one target per embedding required")
    out = params.scale * cos2
    if params.margin != 0.0:
        rows = np.arange(len(t))
        theta = np.arccos(cos2[rows, t])
        out[rows, t] = params.scale * np.cos(theta + params.margin)
    return out[0] if single else out


def softmax_ce(logits, target):
    """Cross-entropy ``-log softmax(logits)[target]`` (max-subtracted).

    Works on one logit vector or a batch; returns per-sample losses for a
    batch.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if not np.all(np.isfinite(z2)):
        raise ValueError("logits must be finite")
    t = _check_targets(np.atleast_1d(target), z2.shape[1])
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[np.arange(len(t)), t]
    loss = np.maximum(loss, 0.0)
    return float(loss[0]) if single else loss


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dual_stream_loss(logits_base, logits_mix, y_a, y_b) -> Tuple[float, float, float]:
    """``(L_total, L_base, L_mix)`` with ``L_mix = 0.5 CE(mix, y_a) + 0.5 CE(mix, y_b)``.

    ``logits_mix`` may be a pair ``(logits_for_y_a, logits_for_y_b)`` when
    the two terms see differently margined logits.
    """
    if isinstance(logits_mix, tuple):
        mix_a, mix_b = logits_mix
    else:
        mix_a = mix_b = logits_mix
    if np.shape(logits_base)[-1] != np.shape(mix_a)[-1]:
        raise DimMismatchError("base and mixed logits have different class counts")
    l_base = float(np.mean(softmax_ce(logits_base, y_a)))
    l_mix = float(np.mean(0.5 * np.asarray(softmax_ce(mix_a, y_a)) + 0.5 * np.asarray(softmax_ce(mix_b, y_b))))
    return l_base + l_mix, l_base, l_mix


# --- loss + analytic backward ----------------------------------------------


@dataclass
class Batch:
    """One step's inputs: base features with ``y_a``; optional mixed stream."""

    x_base: np.ndarray
    y_a: np.ndarray
    x_mix: Optional[np.ndarray] = None
    y_b: Optional[np.ndarray] = None

    @property
    def has_mix(self) -> bool:
        return self.x_mix is not None


@dataclass
class LossParts:
    total: float
    base: float
    mix: Optional[float]


@dataclass
class LossConfig:
    """``mix_margin=False`` drops the angular margin from the mixed-stream terms."""

    kind: str = "softmax"
    arcface: ArcFaceParams = field(default_factory=ArcFaceParams)
    mix_margin: bool = True
    joint_bn: bool = False

    def for_mix(self) -> "LossConfig":
        if self.mix_margin or self.kind != "arcface":
            return self
        return LossConfig("cosine", self.arcface, joint_bn=self.joint_bn)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")


def _logits_and_grad_fn(E, weights, targets, cfg: LossConfig):
    """Logits for ``targets`` plus a closure mapping dL/dlogits to (dE, dW)."""
    if cfg.kind == "softmax":
        logits = E @ weights.T

        def back(G):
            return G @ weights, G.T @ E

        return logits, back

    Wn, wnorms = _normalized_rows(weights)
    raw = E @ Wn.T
    C = np.clip(raw, -1.0, 1.0)
    inside = (raw > -1.0) & (raw < 1.0)
    s, m = cfg.arcface.scale, cfg.arcface.margin
    slope = np.full_like(C, s)
    logits = s * C
    if cfg.kind == "arcface" and m != 0.0:
        rows = np.arange(len(targets))
        c = C[rows, targets]
        logits[rows, targets] = s * np.cos(np.arccos(c) + m)
        sin_t = np.sqrt(np.maximum(1.0 - c * c, 1e-300))
        slope[rows, targets] = s * (math.cos(m) + c * math.sin(m) / sin_t)
    slope = slope * inside

    def back(G):
        dC = G * slope
        dE = dC @ Wn
        dWn = dC.T @ E
        dW = (dWn - Wn * np.sum(dWn * Wn, axis=1, keepdims=True)) / wnorms
        return dE, dW

    return logits, back


def _ce_grad(logits, targets, weight: float):
    """Mean-reduced CE and its gradient w.r.t. logits, scaled by ``weight``."""
    B = len(targets)
    loss = softmax_ce(logits, targets)
    G = _softmax(logits)
    G[np.arange(B), targets] -= 1.0
    return float(np.mean(loss)) * weight, G * (weight / B)


def _backward_head(dE, cache, head: MetricHead):
    E, norms, Zhat, inv_std, X = cache["E"], cache["norms"], cache["Zhat"], cache["inv_std"], cache["X"]
    B = len(X)
    dY = (dE - E * np.sum(dE * E, axis=1, keepdims=True)) / norms
    d_gamma = np.sum(dY * Zhat, axis=0)
    d_beta = np.sum(dY, axis=0)
    dZhat = dY * head.bn_gamma
    dZ = inv_std / B * (B * dZhat - dZhat.sum(axis=0) - Zhat * np.sum(dZhat * Zhat, axis=0))
    return X.T @ dZ, d_gamma, d_beta


def _stream(head, weights, X, groups, need_grad):
    """Forward ``X`` once (one set of BN statistics) and accumulate CE terms.

    ``groups`` is ``[(rows, [(targets, weight, cfg), ...]), ...]`` where
    ``rows`` slices ``X``; each term is a mean-reduced CE over its rows.
    Returns ``(per-group losses, grads, cache)``.
    """
    E, cache = _forward(X, head, train=True)
    losses = []
    dE = np.zeros_like(E)
    dW = np.zeros_like(weights)
    for rows, terms in groups:
        loss = 0.0
        for targets, w, cfg in terms:
            logits, back = _logits_and_grad_fn(E[rows], weights, targets, cfg)
            part, G = _ce_grad(logits, targets, w)
            loss += part
            if need_grad:
                de, dw = back(G)
                dE[rows] += de
                dW += dw
        losses.append(loss)
    grads = None
    if need_grad:
        dP, dg, db = _backward_head(dE, cache, head)
        grads = {"projection": dP, "bn_gamma": dg, "bn_beta": db, "classifier": dW}
    return losses, grads, cache


def loss_and_grads(
    batch: Batch, head: MetricHead, weights: np.ndarray, cfg: LossConfig, need_grad: bool = True
):
    """Dual-stream loss and gradients for every trainable parameter.

    Both streams share parameters, so their gradients are summed.  With
    ``cfg.joint_bn`` the two streams are normalized with the statistics of
    their union; otherwise each stream uses its own.  Returns
    ``(LossParts, grads, caches)``; ``caches[0]`` holds the statistics
    that feed the running BN estimates.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n_classes = weights.shape[0]
    y_a = _check_targets(batch.y_a, n_classes)
    x_base = _check_features(batch.x_base, head)
    if weights.shape[1] != head.dim:
        raise DimMismatchError(f"classifier dim {weights.shape[1]} != head dim {head.dim}")
    base_terms = [(y_a, 1.0, cfg)]
    if not batch.has_mix:
        (l_base,), grads, cache = _stream(head, weights, x_base, [(slice(None), base_terms)], need_grad)
        return LossParts(l_base, l_base, None), grads, [cache]

    y_b = _check_targets(batch.y_b, n_classes)
    x_mix = _check_features(batch.x_mix, head)
    mix_cfg = cfg.for_mix()
    mix_terms = [(y_a, 0.5, mix_cfg), (y_b, 0.5, mix_cfg)]
    if cfg.joint_bn:
        n = len(x_base)
        groups = [(slice(0, n), base_terms), (slice(n, None), mix_terms)]
        (l_base, l_mix), grads, cache = _stream(head, weights, np.concatenate([x_base, x_mix]), groups, need_grad)
        caches = [cache]
    else:
        (l_base,), grads, cache_base = _stream(head, weights, x_base, [(slice(None), base_terms)], need_grad)
        (l_mix,), g_mix, cache_mix = _stream(head, weights, x_mix, [(slice(None), mix_terms)], need_grad)
        caches = [cache_base, cache_mix]
        if need_grad:
            grads = {k: grads[k] + g_mix[k] for k in grads}
    return LossParts(l_base + l_mix, l_base, l_mix), grads, caches


def backward(batch: Batch, head: MetricHead, weights, cfg: LossConfig) -> Dict[str, np.ndarray]:
    return loss_and_grads(batch, head, weights, cfg)[1]


# --- schedule and trainer --------------------------------------------------


def poly_lr(step: int, lr0: float, total_steps: int, power: float = 0.9) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


@dataclass
class TrainingSet:
    """Features with integer labels ``0..n_classes-1``.

    ``mix_features`` / ``mix_labels`` hold the mixed stream: row ``i`` of
    a view is the composite whose pasted image is row ``i`` (label
    ``labels[i]``) over a background labelled ``mix_labels[i]``.  Several
    views may be stacked on a leading axis; one is drawn per step.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    mix_features: Optional[np.ndarray] = None
    mix_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.mix_features is not None:
            mf = np.asarray(self.mix_features, dtype=np.float64)
            ml = np.asarray(self.mix_labels, dtype=np.int64)
            if mf.ndim == 2:
                mf, ml = mf[None], ml[None]
            if mf.shape[1:] != self.features.shape or ml.shape != mf.shape[:2]:
                raise DimMismatchError("mixed stream must align row-for-row with the base features")
            self.mix_features, self.mix_labels = mf, ml

    @property
    def has_mix(self) -> bool:
        return self.mix_features is not None

    def __len__(self):
        return len(self.labels)


@dataclass
class TraceRow:
    step: int
    stage: int
    lr: float
    base: float
    mix: Optional[float]
    total: float


def format_trace(trace: List[TraceRow], with_mix: Optional[bool] = None) -> str:
    """CSV lines ``step,lr,L_base[,L_mix],L_total``; ``L_mix`` only for cutmix runs."""
    if with_mix is None:
        with_mix = any(r.mix is not None for r in trace)
    header = "step,lr,L_base,L_mix,L_total" if with_mix else "step,lr,L_base,L_total"
    lines = [header]
    for r in trace:
        cols = [str(r.step), repr(r.lr), repr(r.base)]
        if with_mix:
            cols.append(repr(r.mix if r.mix is not None else 0.0))
        cols.append(repr(r.total))
        lines.append(",".join(cols))
    return "\n".join(lines) + "\n"


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        # a singleton tail cannot be batch-normalized; fold it into its neighbour
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def steps_per_epoch(n: int, batch_size: int) -> int:
    if n < 2:
        raise BatchTooSmallError("need at least 2 training samples")
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 or full == 0 else 0)


def train_stage(
    head: MetricHead,
    weights: np.ndarray,
    data: TrainingSet,
    config: TrainConfig,
    loss: LossConfig,
    epochs: int,
    seed: int,
    stage: int = 1,
    use_mix: bool = False,
    step_offset: int = 0,
) -> List[TraceRow]:
    """Plain SGD with a poly schedule; updates ``head`` and ``weights`` in place."""
    if use_mix and not data.has_mix:
        raise ValueError("cutmix training needs a mixed stream in the training set")
    rng = np.random.default_rng(seed)
    total_steps = epochs * steps_per_epoch(len(data), config.batch_size)
    velocity = {}
    trace = []
    step = 0
    for _ in range(epochs):
        for idx in _batches(len(data), config.batch_size, rng):
            batch = Batch(data.features[idx], data.labels[idx])
            if use_mix:
                view = int(rng.integers(data.mix_features.shape[0]))
                batch.x_mix = data.mix_features[view, idx]
                batch.y_b = data.mix_labels[view, idx]
            parts, grads, caches = loss_and_grads(batch, head, weights, loss)
            _update_running(head, caches[0]["mean"], caches[0]["var"])
            lr = poly_lr(step, config.lr0, total_steps, config.power)
            params = {
                "projection": head.projection,
                "bn_gamma": head.bn_gamma,
                "bn_beta": head.bn_beta,
                "classifier": weights,
            }
            for name, p in params.items():
                g = grads[name]
                if config.weight_decay:
                    g = g + config.weight_decay * p
                if config.momentum:
                    v = velocity.get(name)
                    v = g if v is None else config.momentum * v + g
                    velocity[name] = v
                    g = v
                p -= lr * g
            trace.append(TraceRow(step_offset + step, stage, lr, parts.base, parts.mix, parts.total))
            step += 1
    return trace


def imprint_classifier(embeddings: np.ndarray, labels: np.ndarray, n_classes: int, seed=0) -> np.ndarray:
    """Class rows initialised at the normalized mean embedding of each class."""
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(n_classes, embeddings.shape[1]))
    for c in range(n_classes):
        members = embeddings[labels == c]
        if len(members):
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > ZERO_NORM:
                W[c] = mean / norm
    return W


def train_two_stage(
    stage1: TrainingSet,
    stage2: TrainingSet,
    config: TrainConfig = TrainConfig(),
    arcface: ArcFaceParams = ArcFaceParams(),
    cutmix: Optional[bool] = None,
):
    """Softmax pre-training on ``stage1``, then ArcFace fine-tuning on ``stage2``.

    Stage 2 may use a different label set; its classifier is imprinted from
    the stage-1 embeddings.  Returns ``(head, stage1_weights, stage2_weights,
    trace)``.
    """
    use_mix = config.cutmix if cutmix is None else cutmix
    head = MetricHead.initialize(
        stage1.features.shape[1],
        config.embed_dim,
        seed=derive_seed(config.seed, "head-init"),
        bn_momentum=config.bn_momentum,
        bn_epsilon=config.bn_epsilon,
    )
    rng = np.random.default_rng(derive_seed(config.seed, "classifier-init"))
    w1 = rng.normal(0.0, 0.01, size=(stage1.n_classes, config.embed_dim))
    trace = train_stage(
        head, w1, stage1, config, LossConfig("softmax"), config.stage1_epochs, derive_seed(config.seed, "stage1")
    )
    w2, trace2 = finetune_stage(head, stage2, config, arcface, use_mix, step_offset=len(trace))
    return head, w1, w2, trace + trace2


def finetune_stage(head, data: TrainingSet, config: TrainConfig, arcface: ArcFaceParams, use_mix=False, step_offset=0):
    emb = head_forward(data.features, head, "eval")
    w2 = imprint_classifier(emb, data.labels, data.n_classes, seed=derive_seed(config.seed, "imprint"))
    trace = train_stage(
        head,
        w2,
        data,
        config,
        LossConfig("arcface", arcface),
        config.stage2_epochs,
        derive_seed(config.seed, "stage2"),
        stage=2,
        use_mix=use_mix,
        step_offset=step_offset,
    )
    return w2, trace


# --- estimator -------------------------------------------------------------


class MetricLearningHead(TransformerMixin, BaseEstimator):
    """Projection + BN + L2 head trained in two stages.

    ``fit`` is softmax pre-training; ``finetune`` continues the same head
    with ArcFace on a (possibly relabelled) set, optionally with the mixed
    stream.  ``transform`` returns eval-mode unit embeddings.
    """

    def __init__(
        self,
        embed_dim=512,
        lr0=0.01,
        power=0.9,
        batch_size=32,
        stage1_epochs=24,
        stage2_epochs=12,
        margin=0.3,
        scale=30.0,
        momentum=0.0,
        weight_decay=0.0,
        bn_momentum=0.1,
        bn_epsilon=1e-5,
        random_state=0,
    ):
        self.embed_dim = embed_dim
        self.lr0 = lr0
        self.power = power
        self.batch_size = batch_size
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.margin = margin
        self.scale = scale
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.bn_momentum = bn_momentum
        self.bn_epsilon = bn_epsilon
        self.random_state = random_state

    @classmethod
    def from_config(cls, train: TrainConfig, arcface: ArcFaceParams = ArcFaceParams()):
        return cls(
            embed_dim=train.embed_dim,
            lr0=train.lr0,
            power=train.power,
            batch_size=train.batch_size,
            stage1_epochs=train.stage1_epochs,
            stage2_epochs=train.stage2_epochs,
            margin=arcface.margin,
            scale=arcface.scale,
            momentum=train.momentum,
            weight_decay=train.weight_decay,
            bn_momentum=train.bn_momentum,
            bn_epsilon=train.bn_epsilon,
            random_state=train.seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            power=self.power,
            batch_size=self.batch_size,
            stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            embed_dim=self.embed_dim,
            bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
            seed=self.random_state,
        )

    def _encode(self, y, classes=None):
        y = np.asarray(y)
        if classes is None:
            classes, codes = np.unique(y, return_inverse=True)
            return classes, codes
        idx = np.searchsorted(classes, y)
        idx = np.clip(idx, 0, len(classes) - 1)
        if np.any(classes[idx] != y):
            raise InvalidTargetError("mixed-stream labels must come from the training label set")
        return classes, idx

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        self.classes_, codes = self._encode(y)
        cfg = self._train_config()
        self.head_ = MetricHead.initialize(
            X.shape[1], self.embed_dim, derive_seed(cfg.seed, "head-init"), self.bn_momentum, self.bn_epsilon
        )
        rng = np.random.default_rng(derive_seed(cfg.seed, "classifier-init"))
        self.classifier_ = rng.normal(0.0, 0.01, size=(len(self.classes_), self.embed_dim))
        data = TrainingSet(X, codes, len(self.classes_))
        self.trace_ = train_stage(
            self.head_, self.classifier_, data, cfg, LossConfig("softmax"), self.stage1_epochs,
            derive_seed(cfg.seed, "stage1"),
        )
        self.loss_kind_ = "softmax"
        self.n_features_in_ = X.shape[1]
        return self

    def finetune(self, X, y, X_mix=None, y_mix=None):
        """ArcFace stage on ``(X, y)``; ``X_mix[i]`` pastes ``X[i]`` over a ``y_mix[i]`` background."""
        check_is_fitted(self, "head_")
        X = check_array(X, dtype=np.float64)
        classes, codes = self._encode(y)
        mix_codes = None
        if X_mix is not None:
            X_mix = np.asarray(X_mix, dtype=np.float64)
            _, mix_codes = self._encode(np.asarray(y_mix).ravel(), classes)
            mix_codes = mix_codes.reshape(np.shape(y_mix))
        data = TrainingSet(X, codes, len(classes), X_mix, mix_codes)
        arc = ArcFaceParams(margin=self.margin, scale=self.scale)
        self.classifier_, trace = finetune_stage(
            self.head_, data, self._train_config(), arc, use_mix=X_mix is not None, step_offset=len(self.trace_)
        )
        self.classes_ = classes
        self.trace_ = self.trace_ + trace
        self.loss_kind_ = "arcface"
        return self

    def transform(self, X):
        check_is_fitted(self, "head_")
        X = check_array(X, dtype=np.float64)
        return head_forward(X, self.head_, "eval")

    def decision_function(self, X):
        E = self.transform(X)
        if self.loss_kind_ == "softmax":
            return E @ self.classifier_.T
        return cosine_logits(E, self.classifier_)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


# --- checkpoint format -----------------------------------------------------
#
# b"HEAD" | u32 version | u32 in_dim | u32 dim | u32 n_classes | u32 stage
# f64 bn_momentum | f64 bn_epsilon | f64 margin | f64 scale
# f64[in_dim*dim] projection | f64[dim] x4 gamma, beta, running mean, running var
# f64[n_classes*dim] classifier | i64[n_classes] original class labels
# All little-endian, arrays row-major.

HEAD_MAGIC = b"HEAD"
HEAD_VERSION = 1
_HEAD_HEADER = struct.Struct("<4sIIIII4d")


@dataclass
class Checkpoint:
    head: MetricHead
    classifier: np.ndarray
    classes: np.ndarray
    stage: int
    arcface: ArcFaceParams = field(default_factory=ArcFaceParams)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    h = ckpt.head
    n_classes = ckpt.classifier.shape[0]
    header = _HEAD_HEADER.pack(
        HEAD_MAGIC, HEAD_VERSION, h.in_dim, h.dim, n_classes, ckpt.stage,
        h.bn_momentum, h.bn_epsilon, ckpt.arcface.margin, ckpt.arcface.scale,
    )
    arrays = [h.projection, h.bn_gamma, h.bn_beta, h.bn_running_mean, h.bn_running_var, ckpt.classifier]
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    body += np.asarray(ckpt.classes, dtype="<i8").tobytes()
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _HEAD_HEADER.size:
        raise FormatError("truncated HEAD header")
    magic, version, in_dim, dim, n_classes, stage, bn_m, bn_eps, margin, scale = _HEAD_HEADER.unpack_from(data)
    if magic != HEAD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {HEAD_MAGIC!r}")
    if version != HEAD_VERSION:
        raise FormatError(f"unsupported HEAD version {version}")
    sizes = [in_dim * dim, dim, dim, dim, dim, n_classes * dim]
    expected = _HEAD_HEADER.size + 8 * (sum(sizes) + n_classes)
    if len(data) != expected:
        raise FormatError(f"HEAD payload is {len(data)} bytes, expected {expected}")
    pos = _HEAD_HEADER.size
    arrays = []
    for n in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    classes = np.frombuffer(data, dtype="<i8", count=n_classes, offset=pos).astype(np.int64)
    proj, gamma, beta, rmean, rvar, clf = arrays
    head = MetricHead(proj.reshape(in_dim, dim), gamma, beta, rmean, rvar, bn_m, bn_eps)
    return Checkpoint(head, clf.reshape(n_classes, dim), classes, stage, ArcFaceParams(margin=margin, scale=scale))
