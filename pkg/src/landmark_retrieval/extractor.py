"""Stand-in backbone and synthetic landmark worlds.

:class:`ToyExtractor` turns an image into a 4x4 grid of 64 channels: each
cell summarises its 2x2 sub-blocks by per-channel mean and variance, and
a fixed random projection (plus ReLU) maps those statistics to channels.
A cell's features depend only on pixels inside that cell.

Two generators build worlds whose categories are made of several
well-separated sub-modes (think indoor vs outdoor views of one landmark)
plus mislabeled outliers: one directly in embedding space, one in pixel
space for the augmentation path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .config import CutmixConfig, SyntheticWorldConfig, derive_seed
from .core import LabeledEmbedding, gap_pool, gem_pool
from .cutmix import check_image, corner_cutmix, draw_corner_fraction, make_mixed_sample
from .exceptions import ConfigError

GRID = 4
SUB = 2
CHANNELS = 64
_WEIGHT_SEED = 20200907


@runtime_checkable
class FeatureExtractor(Protocol):
    """Anything mapping an image to an ``(H, W, C)`` feature grid, deterministically."""

    def extract(self, image: np.ndarray) -> np.ndarray: ...


def _bin_edges(n: int, bins: int) -> List[Tuple[int, int]]:
    edges = []
    for k in range(bins):
        lo = (k * n) // bins
        hi = max(((k + 1) * n) // bins, lo + 1)
        edges.append((lo, min(hi, n)))
    return edges


def _weights(channels_in: int):
    rng = np.random.default_rng([_WEIGHT_SEED, channels_in])
    n_stats = SUB * SUB * channels_in * 2
    W = rng.normal(0.0, 1.0 / np.sqrt(n_stats), size=(n_stats, CHANNELS))
    b = rng.normal(0.0, 0.1, size=CHANNELS)
    return W, b


_WEIGHTS = {c: _weights(c) for c in (1, 3)}


def cell_statistics(image) -> np.ndarray:
    """``(4, 4, 8*C)`` array of sub-block means then variances per cell."""
    img = check_image(image)
    h, w, c = img.shape
    rows = _bin_edges(h, GRID * SUB)
    cols = _bin_edges(w, GRID * SUB)
    means = np.empty((GRID * SUB, GRID * SUB, c))
    variances = np.empty_like(means)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            block = img[r0:r1, c0:c1]
            means[i, j] = block.mean(axis=(0, 1))
            variances[i, j] = block.var(axis=(0, 1))
    # (8, 8, C) -> (4, 2, 4, 2, C) -> (4, 4, 2*2*C)
    def per_cell(a):
        return a.reshape(GRID, SUB, GRID, SUB, c).transpose(0, 2, 1, 3, 4).reshape(GRID, GRID, SUB * SUB * c)

    return np.concatenate([per_cell(means), per_cell(variances)], axis=2)


def toy_extract(image) -> np.ndarray:
    """Deterministic ``(4, 4, 64)`` feature grid of an image."""
    stats = cell_statistics(image)
    W, b = _WEIGHTS[check_image(image).shape[2]]
    return np.maximum(stats @ W + b, 0.0)


def cell_bounds(height: int, width: int) -> List[List[Tuple[slice, slice]]]:
    """Pixel rectangle that each grid cell reads from."""
    rows = _bin_edges(height, GRID * SUB)
    cols = _bin_edges(width, GRID * SUB)
    return [
        [
            (slice(rows[SUB * i][0], rows[SUB * i + SUB - 1][1]), slice(cols[SUB * j][0], cols[SUB * j + SUB - 1][1]))
            for j in range(GRID)
        ]
        for i in range(GRID)
    ]


class ToyExtractor(TransformerMixin, BaseEstimator):
    """Estimator face of :func:`toy_extract` with optional pooling.

    ``pooling`` is ``"gap"``, ``"gem"`` or ``None`` (return the grids).
    """

    def __init__(self, pooling: Optional[str] = "gap", gem_p: float = 3.0):
        self.pooling = pooling
        self.gem_p = gem_p

    def fit(self, X=None, y=None):
        return self

    def extract(self, image) -> np.ndarray:
        return toy_extract(image)

    def _pool(self, grid):
        if self.pooling == "gap":
            return gap_pool(grid)
        if self.pooling == "gem":
            return gem_pool(grid, self.gem_p)
        if self.pooling is None:
            return grid
        raise ValueError(f"unknown pooling {self.pooling!r}")

    def transform(self, X):
        return np.stack([self._pool(toy_extract(img)) for img in X])


# --- embedding-space world -------------------------------------------------


@dataclass
class SyntheticDataset:
    """Train / gallery / query splits plus where every train row came from.

    ``origin[id]`` is ``(category, mode)`` for clean rows and
    ``(category, -1)`` for mislabeled outliers (category = assigned label).
    Iterating yields ``train, gallery, queries``.
    """

    train: List[LabeledEmbedding]
    gallery: List[LabeledEmbedding]
    queries: List[LabeledEmbedding]
    origin: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    def __iter__(self) -> Iterator[List[LabeledEmbedding]]:
        return iter((self.train, self.gallery, self.queries))

    def manifest_records(self) -> List[dict]:
        recs = []
        for split, rows in (("train", self.train), ("gallery", self.gallery), ("query", self.queries)):
            recs.extend({"id": r.id, "label": r.label, "split": split} for r in rows)
        return recs


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _mode_centres(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> np.ndarray:
    """``(categories, modes, dim)`` unit vectors, each ``mode_separation`` from its category centre."""
    centres = _unit(rng.normal(size=(cfg.categories, cfg.feature_dim)))
    modes = np.empty((cfg.categories, cfg.modes_per_category, cfg.feature_dim))
    for c in range(cfg.categories):
        for m in range(cfg.modes_per_category):
            if cfg.modes_per_category == 1:
                modes[c, m] = centres[c]
                continue
            u = rng.normal(size=cfg.feature_dim)
            u -= u.dot(centres[c]) * centres[c]
            u /= np.linalg.norm(u)
            modes[c, m] = np.cos(cfg.mode_separation) * centres[c] + np.sin(cfg.mode_separation) * u
    return modes


def _check_world(cfg: SyntheticWorldConfig):
    if not 0 <= cfg.noise_fraction < 1:
        raise ConfigError(f"world.noise_fraction must be in [0, 1), got {cfg.noise_fraction}")


def _noise_count(n_clean: int, fraction: float) -> int:
    return int(round(n_clean * fraction / (1.0 - fraction)))


def generate_synthetic_dataset(cfg: SyntheticWorldConfig = SyntheticWorldConfig()) -> SyntheticDataset:
    """Embedding-space world of multi-mode categories plus uniform outliers.

    Train rows are clean mode samples plus outliers drawn uniformly on the
    sphere and given random labels.  Gallery and queries are clean.
    """
    _check_world(cfg)
    rng = np.random.default_rng(cfg.seed)
    modes = _mode_centres(cfg, rng)
    sigma = cfg.mode_spread / np.sqrt(cfg.feature_dim)

    def sample(c, m, n):
        return _unit(modes[c, m] + sigma * rng.normal(size=(n, cfg.feature_dim)))

    train_vecs, train_labels, origin_list = [], [], []
    gallery, queries = [], []
    for c in range(cfg.categories):
        for m in range(cfg.modes_per_category):
            train_vecs.append(sample(c, m, cfg.points_per_mode))
            train_labels += [c] * cfg.points_per_mode
            origin_list += [(c, m)] * cfg.points_per_mode
            for split, n, out in (("g", cfg.gallery_per_mode, gallery), ("q", cfg.queries_per_mode, queries)):
                for v in sample(c, m, n):
                    out.append((c, v))
    n_clean = len(train_labels)
    n_noise = _noise_count(n_clean, cfg.noise_fraction)
    noise_vecs = _unit(rng.normal(size=(n_noise, cfg.feature_dim)))
    noise_labels = rng.integers(0, cfg.categories, size=n_noise)
    vecs = np.concatenate(train_vecs + [noise_vecs]) if n_clean + n_noise else np.zeros((0, cfg.feature_dim))
    labels = train_labels + noise_labels.tolist()
    origin_list += [(int(lab), -1) for lab in noise_labels]
    # shuffle so outliers are not all at the end of the id range
    order = rng.permutation(len(labels))
    width = len(str(max(len(labels), len(gallery), len(queries), 1)))
    train, origin = [], {}
    for k, i in enumerate(order):
        rid = f"t{k:0{width}d}"
        train.append(LabeledEmbedding(rid, labels[i], vecs[i]))
        origin[rid] = origin_list[i]
    gal = [LabeledEmbedding(f"g{k:0{width}d}", c, v) for k, (c, v) in enumerate(gallery)]
    qry = [LabeledEmbedding(f"q{k:0{width}d}", c, v) for k, (c, v) in enumerate(queries)]
    return SyntheticDataset(train, gal, qry, origin)


# --- pixel-space world -----------------------------------------------------


@dataclass
class PixelWorld:
    """Images with labels for each split; ``query_images`` are corner-occluded."""

    train_images: np.ndarray
    train_labels: np.ndarray
    gallery_images: np.ndarray
    gallery_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    clean_query_images: np.ndarray


def _prototypes(cfg: SyntheticWorldConfig, rng):
    """Per-mode prototype images built from random coloured blocks."""
    s = cfg.image_size
    blocks = rng.uniform(0.1, 0.9, size=(cfg.categories, cfg.modes_per_category, 8, 8, 3))
    return np.repeat(np.repeat(blocks, -(-s // 8), axis=2), -(-s // 8), axis=3)[:, :, :s, :s]


def _render(proto, n, rng, jitter=0.06, pixel_noise=0.05):
    shift = rng.normal(0.0, jitter, size=(n, 1, 1, 3))
    noise = rng.normal(0.0, pixel_noise, size=(n,) + proto.shape)
    return np.clip(proto[None] + shift + noise, 0.0, 1.0)


def generate_pixel_world(
    cfg: SyntheticWorldConfig, cutmix: CutmixConfig = CutmixConfig(), seed: Optional[int] = None
) -> PixelWorld:
    """Pixel-space landmarks; queries get another category's image pasted on a corner."""
    _check_world(cfg)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    protos = _prototypes(cfg, rng)
    splits = {"train": cfg.points_per_mode, "gallery": cfg.gallery_per_mode, "query": cfg.queries_per_mode}
    out = {}
    for name, per_mode in splits.items():
        imgs, labs = [], []
        for c in range(cfg.categories):
            for m in range(cfg.modes_per_category):
                imgs.append(_render(protos[c, m], per_mode, rng))
                labs += [c] * per_mode
        shape = (0, cfg.image_size, cfg.image_size, 3)
        out[name] = (np.concatenate(imgs) if labs else np.zeros(shape), np.array(labs, dtype=np.int64))
    train_imgs, train_labs = out["train"]
    n_noise = _noise_count(len(train_labs), cfg.noise_fraction)
    if n_noise:
        noise_imgs = rng.uniform(0.0, 1.0, size=(n_noise,) + train_imgs.shape[1:])
        train_imgs = np.concatenate([train_imgs, noise_imgs])
        train_labs = np.concatenate([train_labs, rng.integers(0, cfg.categories, size=n_noise)])
    q_imgs, q_labs = out["query"]
    occluded = np.empty_like(q_imgs)
    for i in range(len(q_labs)):
        other = rng.choice(np.flatnonzero(out["train"][1] != q_labs[i])) if cfg.categories > 1 else i % len(q_labs)
        source = out["train"][0][other] if cfg.categories > 1 else q_imgs[i]
        corner, fraction = draw_corner_fraction(rng, (cutmix.fraction_lo, cutmix.fraction_hi))
        occluded[i] = corner_cutmix(source, q_imgs[i], corner, fraction)
    return PixelWorld(train_imgs, train_labs, *out["gallery"], occluded, q_labs, q_imgs)


def mixed_views(
    images: np.ndarray,
    labels: np.ndarray,
    n_views: int,
    fraction_range=(0.3, 0.7),
    seed: int = 0,
    extractor: Optional[ToyExtractor] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixed-stream features for every row, ``n_views`` times.

    Row ``i`` of each view pastes image ``i`` over a random partner with a
    different label.  Returns ``(features (V, N, F), partner_labels (V, N),
    partner_index (V, N))``.
    """
    extractor = extractor or ToyExtractor()
    labels = np.asarray(labels)
    n = len(labels)
    feats, partner_labels, partners = [], [], []
    for v in range(n_views):
        rng = np.random.default_rng(derive_seed(seed, f"mix-view-{v}"))
        idx = np.empty(n, dtype=np.int64)
        mixed = []
        for i in range(n):
            candidates = np.flatnonzero(labels != labels[i])
            j = int(rng.choice(candidates)) if len(candidates) else int(rng.integers(n))
            idx[i] = j
            sample = make_mixed_sample(
                (images[i], labels[i]), (images[j], labels[j]), fraction_range, int(rng.integers(2**32))
            )
            mixed.append(sample.mixed)
        feats.append(extractor.transform(mixed))
        partner_labels.append(labels[idx])
        partners.append(idx)
    return np.stack(feats), np.stack(partner_labels), np.stack(partners)


def as_labeled(features: np.ndarray, labels: Sequence[int], prefix: str) -> List[LabeledEmbedding]:
    width = len(str(max(len(labels), 1)))
    return [LabeledEmbedding(f"{prefix}{i:0{width}d}", int(l), f) for i, (f, l) in enumerate(zip(features, labels))]
