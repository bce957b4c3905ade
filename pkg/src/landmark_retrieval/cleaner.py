"""Label cleaning by per-category density clustering.

Each original category is clustered with DBSCAN under cosine distance.
Every cluster becomes a new category; the leftover noise is re-clustered
with a looser radius and clusters that are big enough survive as
long-tail categories.  Everything else is dropped.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array

from .config import DbscanParams
from .core import LabeledEmbedding, l2_normalize_rows, stack_vectors
from .exceptions import DimMismatchError

NOISE = -1
_UNVISITED = -2
_BLOCK = 2048


def _neighbor_lists(X: np.ndarray, eps: float) -> List[np.ndarray]:
    """Indices within cosine distance ``eps`` of each row (self included)."""
    Xn = l2_normalize_rows(X)
    out = []
    for start in range(0, len(Xn), _BLOCK):
        dist = 1.0 - Xn[start : start + _BLOCK] @ Xn.T
        out.extend(np.flatnonzero(row <= eps) for row in dist)
    return out


def dbscan_labels(X: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster rows of ``X`` in row order; returns ids ``0..K-1`` or ``NOISE``.

    Rows are visited in order, so a border point goes to the first cluster
    that reaches it and clusters are numbered by discovery.
    """
    n = len(X)
    labels = np.full(n, _UNVISITED, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = _neighbor_lists(X, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for i in range(n):
        if labels[i] != _UNVISITED:
            continue
        if not core[i]:
            labels[i] = NOISE
            continue
        labels[i] = cluster
        queue = list(neighbors[i])
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == NOISE:
                labels[j] = cluster
            elif labels[j] == _UNVISITED:
                labels[j] = cluster
                if core[j]:
                    queue.extend(neighbors[j])
        cluster += 1
    return labels


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster id (or ``NOISE``) per point id, in ascending id order."""

    labels: Dict[str, int]

    @property
    def n_clusters(self) -> int:
        return len({c for c in self.labels.values() if c != NOISE})

    def clusters(self) -> List[List[str]]:
        groups: List[List[str]] = [[] for _ in range(self.n_clusters)]
        for pid, c in self.labels.items():
            if c != NOISE:
                groups[c].append(pid)
        return groups

    def noise(self) -> List[str]:
        return [pid for pid, c in self.labels.items() if c == NOISE]


def _sorted_by_id(points: Sequence[LabeledEmbedding]) -> List[LabeledEmbedding]:
    return sorted(points, key=lambda p: p.id)


def dbscan(
    points: Sequence[LabeledEmbedding], params: DbscanParams, eps: Optional[float] = None
) -> ClusterAssignment:
    """Canonical DBSCAN over ``points`` using cosine distance.

    ``eps`` overrides ``params.eps`` (the rescue pass uses the relaxed radius).
    """
    pts = _sorted_by_id(points)
    if not pts:
        return ClusterAssignment({})
    X = stack_vectors(pts)
    labels = dbscan_labels(X, params.eps if eps is None else eps, params.min_pts)
    return ClusterAssignment({p.id: int(c) for p, c in zip(pts, labels)})


def clean_category(
    members: Sequence[LabeledEmbedding], params: DbscanParams
) -> Tuple[List[List[str]], List[str]]:
    """Strict-radius clusters of one category, plus its noise ids."""
    if len({m.label for m in members}) > 1:
        raise ValueError("clean_category expects members of a single label")
    assignment = dbscan(members, params)
    return assignment.clusters(), assignment.noise()


def rescue_noise(noise: Sequence[LabeledEmbedding], params: DbscanParams) -> List[List[str]]:
    """Re-cluster noise per original label with the relaxed radius.

    Clusters smaller than ``min_cluster_size`` are discarded.  Groups come
    back ordered by label, then by cluster discovery.
    """
    by_label = defaultdict(list)
    for p in noise:
        by_label[p.label].append(p)
    rescued = []
    for label in sorted(by_label):
        groups = dbscan(by_label[label], params, eps=params.relaxed_eps).clusters()
        rescued.extend(g for g in groups if len(g) >= params.min_cluster_size)
    return rescued


@dataclass(frozen=True)
class CategoryReport:
    old_label: int
    new_labels: Tuple[int, ...]
    kept: int
    rescued: int
    dropped: int


@dataclass(frozen=True)
class RelabelReport:
    categories: Tuple[CategoryReport, ...] = ()

    @property
    def kept(self) -> int:
        return sum(c.kept for c in self.categories)

    @property
    def rescued(self) -> int:
        return sum(c.rescued for c in self.categories)

    @property
    def dropped(self) -> int:
        return sum(c.dropped for c in self.categories)

    @property
    def total(self) -> int:
        return self.kept + self.rescued + self.dropped

    @property
    def new_category_count(self) -> int:
        return sum(len(c.new_labels) for c in self.categories)

    @property
    def mapping(self) -> Dict[int, List[int]]:
        return {c.old_label: list(c.new_labels) for c in self.categories}

    def to_text(self) -> str:
        lines = []
        for c in self.categories:
            new = ",".join(str(x) for x in c.new_labels) or "-"
            lines.append(
                f"old_label={c.old_label} new_labels={new} "
                f"kept={c.kept} rescued={c.rescued} dropped={c.dropped}"
            )
        lines.append(
            f"SUMMARY input={self.total} kept={self.kept} rescued={self.rescued} "
            f"dropped={self.dropped} categories_in={len(self.categories)} "
            f"categories_out={self.new_category_count}"
        )
        return "\n".join(lines) + "\n"


def _clean_one(members: List[LabeledEmbedding], params: DbscanParams):
    clusters, noise_ids = clean_category(members, params)
    noise_set = set(noise_ids)
    rescued = rescue_noise([m for m in members if m.id in noise_set], params)
    return clusters, rescued


def clean_dataset(
    manifest: Sequence[LabeledEmbedding], params: DbscanParams, n_jobs: Optional[int] = None
) -> Tuple[List[LabeledEmbedding], RelabelReport]:
    """Relabel a dataset: one new category per surviving cluster.

    New labels are dense and assigned in ascending ``(old label, cluster)``
    order, strict clusters before rescued ones.  The output is sorted by id.
    """
    rows = _sorted_by_id(manifest)
    if rows:
        dim = rows[0].dim
        bad = next((r for r in rows if r.dim != dim), None)
        if bad is not None:
            raise DimMismatchError(f"row {bad.id!r} has dim {bad.dim}, expected {dim}")
    by_label = defaultdict(list)
    for r in rows:
        by_label[r.label].append(r)
    old_labels = sorted(by_label)
    # per-category jobs are independent; relabeling below is a sequential reduction
    results = Parallel(n_jobs=n_jobs)(delayed(_clean_one)(by_label[lab], params) for lab in old_labels)

    new_label_of: Dict[str, int] = {}
    reports = []
    next_label = 0
    for old, (clusters, rescued) in zip(old_labels, results):
        new_labels = []
        for group in list(clusters) + list(rescued):
            for pid in group:
                new_label_of[pid] = next_label
            new_labels.append(next_label)
            next_label += 1
        kept = sum(len(g) for g in clusters)
        n_rescued = sum(len(g) for g in rescued)
        reports.append(
            CategoryReport(old, tuple(new_labels), kept, n_rescued, len(by_label[old]) - kept - n_rescued)
        )
    out = [LabeledEmbedding(r.id, new_label_of[r.id], r.vector) for r in rows if r.id in new_label_of]
    return out, RelabelReport(tuple(reports))


class CosineDBSCAN(ClusterMixin, BaseEstimator):
    """DBSCAN under cosine distance with canonical row-order semantics.

    ``labels_`` uses ``-1`` for noise, like :class:`sklearn.cluster.DBSCAN`.
    """

    def __init__(self, eps: float = 0.3, min_pts: int = 5):
        self.eps = eps
        self.min_pts = min_pts

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.labels_ = dbscan_labels(X, self.eps, self.min_pts)
        counts = np.array([len(nb) for nb in _neighbor_lists(X, self.eps)])
        self.core_sample_indices_ = np.flatnonzero(counts >= self.min_pts)
        return self


class EmbeddingClusterCleaner(BaseEstimator):
    """Estimator wrapper around :func:`clean_dataset` for array inputs.

    After ``fit(X, y)``, ``labels_`` holds the new category per row
    (``-1`` for dropped rows) and ``report_`` the :class:`RelabelReport`.
    """

    def __init__(self, eps=0.3, relaxed_eps=0.5, min_pts=5, min_cluster_size=2, n_jobs=None):
        self.eps = eps
        self.relaxed_eps = relaxed_eps
        self.min_pts = min_pts
        self.min_cluster_size = min_cluster_size
        self.n_jobs = n_jobs

    def _params(self) -> DbscanParams:
        return DbscanParams(
            eps=self.eps,
            relaxed_eps=self.relaxed_eps,
            min_pts=self.min_pts,
            min_cluster_size=self.min_cluster_size,
        )

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (len(X),):
            raise DimMismatchError(f"y has shape {y.shape}, expected ({len(X)},)")
        width = max(1, len(str(len(X))))
        rows = [LabeledEmbedding(f"{i:0{width}d}", int(lab), x) for i, (x, lab) in enumerate(zip(X, y))]
        cleaned, self.report_ = clean_dataset(rows, self._params(), n_jobs=self.n_jobs)
        labels = np.full(len(X), NOISE, dtype=np.int64)
        for r in cleaned:
            labels[int(r.id)] = r.label
        self.labels_ = labels
        self.n_categories_ = self.report_.new_category_count
        return self

    def fit_predict(self, X, y):
        return self.fit(X, y).labels_
