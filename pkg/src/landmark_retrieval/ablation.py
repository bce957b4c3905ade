"""Paired experiments on synthetic worlds.

Each function trains the same starting head twice, changing one thing,
and returns both retrieval scores.  They are small enough to run in a
few seconds per seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .cleaner import RelabelReport, clean_dataset
from .config import ArcFaceParams, CutmixConfig, DbscanParams, SyntheticWorldConfig, TrainConfig, derive_seed
from .core import LabeledEmbedding, stack_vectors
from .cutmix import corner_cutmix, draw_corner_fraction
from .eval import build_index, ensemble_evaluate, evaluate
from .extractor import ToyExtractor, as_labeled, generate_pixel_world, generate_synthetic_dataset, mixed_views
from .head import (
    LossConfig,
    MetricHead,
    MetricLearningHead,
    TrainingSet,
    finetune_stage,
    head_forward,
    train_stage,
)

# Many categories per embedding dimension: the head cannot give every
# noisy label its own direction, which is where cleaning pays off.
CLEANING_WORLD = dict(
    categories=40,
    modes_per_category=2,
    points_per_mode=30,
    mode_separation=float(np.pi / 2),
    mode_spread=0.3,
    noise_fraction=0.3,
    feature_dim=16,
    gallery_per_mode=5,
    queries_per_mode=2,
)
SMALL_HEAD = dict(embed_dim=8, lr0=0.1, batch_size=32, stage1_epochs=10, stage2_epochs=10)

CUTMIX_WORLD = dict(
    kind="pixel",
    categories=20,
    modes_per_category=1,
    points_per_mode=20,
    gallery_per_mode=10,
    queries_per_mode=5,
    noise_fraction=0.0,
    image_size=32,
)
MIX_VIEWS = 4


@dataclass(frozen=True)
class PairedResult:
    baseline: float
    treated: float

    @property
    def gain(self) -> float:
        return self.treated - self.baseline


def _embed(head: MetricHead, rows: List[LabeledEmbedding]) -> List[LabeledEmbedding]:
    E = head_forward(stack_vectors(rows), head, "eval")
    return [LabeledEmbedding(r.id, r.label, e) for r, e in zip(rows, E)]


def _stage1(X, y, n_classes: int, tc: TrainConfig) -> MetricHead:
    head = MetricHead.initialize(
        X.shape[1], tc.embed_dim, derive_seed(tc.seed, "head-init"), tc.bn_momentum, tc.bn_epsilon
    )
    rng = np.random.default_rng(derive_seed(tc.seed, "classifier-init"))
    w1 = rng.normal(0.0, 0.01, size=(n_classes, tc.embed_dim))
    train_stage(
        head, w1, TrainingSet(X, y, n_classes), tc, LossConfig("softmax"), tc.stage1_epochs,
        derive_seed(tc.seed, "stage1"),
    )
    return head


def cleaning_ablation(
    seed: int, world: Optional[dict] = None, train: Optional[dict] = None, params: DbscanParams = DbscanParams()
) -> Tuple[PairedResult, RelabelReport]:
    """Stage 2 on noisy labels vs. on labels cleaned from stage-1 embeddings.

    Both arms start from the same stage-1 head.  Queries count gallery
    items of their true category as relevant.
    """
    w = SyntheticWorldConfig(seed=seed, **(CLEANING_WORLD if world is None else world))
    tc = TrainConfig(seed=seed, **(SMALL_HEAD if train is None else train))
    ds = generate_synthetic_dataset(w)
    X = stack_vectors(ds.train)
    y = np.array([r.label for r in ds.train])
    head = _stage1(X, y, w.categories, tc)

    cleaned, report = clean_dataset(_embed(head, ds.train), params)
    by_id = {r.id: r for r in ds.train}
    Xc = stack_vectors([by_id[r.id] for r in cleaned])
    yc = np.array([r.label for r in cleaned])

    scores = []
    for Xs, ys, k in ((X, y, w.categories), (Xc, yc, report.new_category_count)):
        h = head.copy()
        finetune_stage(h, TrainingSet(Xs, ys, k), tc, ArcFaceParams())
        scores.append(evaluate(build_index(_embed(h, ds.gallery)), _embed(h, ds.queries)).mean_ap)
    return PairedResult(*scores), report


def cutmix_ablation(
    seed: int, world: Optional[dict] = None, train: Optional[dict] = None, cutmix: CutmixConfig = CutmixConfig()
) -> PairedResult:
    """Stage 2 with and without the mixed stream, scored on occluded queries."""
    w = SyntheticWorldConfig(seed=seed, **(CUTMIX_WORLD if world is None else world))
    tc = TrainConfig(seed=seed, **(SMALL_HEAD if train is None else train))
    frac = (cutmix.fraction_lo, cutmix.fraction_hi)
    pw = generate_pixel_world(w, cutmix)
    ex = ToyExtractor()
    Xtr = ex.transform(pw.train_images)
    Xg = ex.transform(pw.gallery_images)
    Xq = ex.transform(pw.query_images)
    mf, ml, _ = mixed_views(pw.train_images, pw.train_labels, MIX_VIEWS, frac, derive_seed(seed, "mix"), ex)
    head = _stage1(Xtr, pw.train_labels, w.categories, tc)

    scores = []
    for use_mix in (False, True):
        h = head.copy()
        data = TrainingSet(Xtr, pw.train_labels, w.categories, mf, ml)
        finetune_stage(h, data, tc, ArcFaceParams(), use_mix=use_mix)
        gallery = as_labeled(head_forward(Xg, h, "eval"), pw.gallery_labels, "g")
        queries = as_labeled(head_forward(Xq, h, "eval"), pw.query_labels, "q")
        scores.append(evaluate(build_index(gallery), queries).mean_ap)
    return PairedResult(*scores)


def occlude(images: np.ndarray, sources: np.ndarray, seed: int, fraction_range=(0.3, 0.7)) -> np.ndarray:
    """Paste ``sources[i]`` on a random corner of ``images[i]``."""
    rng = np.random.default_rng(seed)
    out = np.empty_like(images)
    for i, (img, src) in enumerate(zip(images, sources)):
        corner, fraction = draw_corner_fraction(rng, fraction_range)
        out[i] = corner_cutmix(src, img, corner, fraction)
    return out


@dataclass(frozen=True)
class EnsembleResult:
    map_a: float
    map_b: float
    fused: float


def blobs(seed: int, n_classes=20, per_class=8, dim=16, spread=0.6):
    """Gaussian class blobs split into gallery and query halves."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    X = centres[labels] + spread * rng.normal(size=(len(labels), dim))
    is_query = np.tile(np.arange(per_class) < per_class // 4, n_classes)
    return X[~is_query], labels[~is_query], X[is_query], labels[is_query]


def ensemble_instance(seed: int, out_dim: int = 6, k: int = 100) -> EnsembleResult:
    """Two random linear projections of the same blobs, alone and fused."""
    Xg, yg, Xq, yq = blobs(seed)
    rng = np.random.default_rng(derive_seed(seed, "projections"))
    scores = []
    parts = []
    for _ in range(2):
        P = rng.normal(size=(Xg.shape[1], out_dim))
        g = as_labeled(Xg @ P, yg, "g")
        q = as_labeled(Xq @ P, yq, "q")
        parts.append((build_index(g), q))
        scores.append(evaluate(parts[-1][0], q, k).mean_ap)
    fused = ensemble_evaluate(parts[0][0], parts[1][0], parts[0][1], parts[1][1], k).mean_ap
    return EnsembleResult(scores[0], scores[1], fused)


def separable_toy(seed: int = 0, n_classes=3, per_class=100, dim=16, noise=0.2):
    """Class means evenly spaced on a circle inside a random 2-D subspace, plus noise."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    y = np.repeat(np.arange(n_classes), per_class)
    X = (means @ Q)[y] + noise * rng.normal(size=(len(y), dim))
    return X, y


def intra_class_cosine(E: np.ndarray, y: np.ndarray) -> float:
    """Mean over classes of the mean pairwise cosine between distinct members."""
    vals = []
    for c in np.unique(y):
        Z = E[y == c]
        Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
        S = Z @ Z.T
        vals.append(S[np.triu_indices(len(Z), 1)].mean())
    return float(np.mean(vals))


@dataclass(frozen=True)
class TwoStageResult:
    stage1_accuracy: float
    stage1_intra: float
    stage2_intra: float
    trace: tuple


def two_stage_toy(seed: int = 0, epochs: int = 20) -> TwoStageResult:
    X, y = separable_toy(seed)
    tc = TrainConfig(embed_dim=512, lr0=0.01, stage1_epochs=epochs, stage2_epochs=epochs, seed=seed)
    model = MetricLearningHead.from_config(tc).fit(X, y)
    acc = float(np.mean(model.predict(X) == y))
    intra1 = intra_class_cosine(model.transform(X), y)
    stage1_trace = tuple(model.trace_)
    model.finetune(X, y)
    return TwoStageResult(acc, intra1, intra_class_cosine(model.transform(X), y), stage1_trace)


def smoothed(values, alpha: float = 0.1) -> np.ndarray:
    """Exponential moving average seeded with the first value."""
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else (1 - alpha) * acc + alpha * v
        out[i] = acc
    return out
