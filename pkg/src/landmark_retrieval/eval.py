"""Exact cosine retrieval and mAP@k.

Gallery rows sharing a query's label are its relevant set.  A query whose
id also appears in the gallery never retrieves itself, and queries with
no relevant gallery item are left out of the mean (their AP is ``None``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import (
    LabeledEmbedding,
    as_embedding,
    check_unique_ids,
    concat_embeddings,
    l2_normalize,
    l2_normalize_rows,
    stack_vectors,
)
from .exceptions import DimMismatchError, IdMisalignmentError


@dataclass(frozen=True)
class RetrievalIndex:
    """Immutable gallery: ids ascending, unit-norm rows."""

    ids: Tuple[str, ...]
    labels: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)


def build_index(gallery: Sequence[LabeledEmbedding]) -> RetrievalIndex:
    rows = sorted(gallery, key=lambda r: r.id)
    check_unique_ids(rows)
    if not rows:
        vectors = np.zeros((0, 0))
    else:
        vectors = l2_normalize_rows(stack_vectors(rows))
    vectors.setflags(write=False)
    labels = np.array([r.label for r in rows], dtype=np.int64)
    labels.setflags(write=False)
    return RetrievalIndex(tuple(r.id for r in rows), labels, vectors)


@dataclass(frozen=True)
class RankedResult:
    query_id: str
    hits: Tuple[Tuple[str, float], ...]

    @property
    def ids(self) -> List[str]:
        return [h[0] for h in self.hits]


def _ranked_positions(index: RetrievalIndex, sims: np.ndarray, k: int, exclude: Optional[str]):
    # the gallery is id-sorted, so a stable sort on -sim breaks ties by id
    order = np.argsort(-sims, kind="stable")
    if exclude is not None:
        order = order[[index.ids[i] != exclude for i in order]] if len(order) else order
    return order[:k]


def _check_query(index: RetrievalIndex, query, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = l2_normalize(query)
    if len(index) and q.shape[0] != index.dim:
        raise DimMismatchError(f"query dim {q.shape[0]} != index dim {index.dim}")
    return q


def search(index: RetrievalIndex, query, k: int = 100, query_id: str = "", exclude_self: bool = True) -> RankedResult:
    """Top-``k`` gallery rows by cosine similarity, exhaustively."""
    q = _check_query(index, query, k)
    if not len(index):
        return RankedResult(query_id, ())
    sims = np.clip(index.vectors @ q, -1.0, 1.0)
    exclude = query_id if exclude_self and query_id else None
    top = _ranked_positions(index, sims, k, exclude)
    return RankedResult(query_id, tuple((index.ids[i], float(sims[i])) for i in top))


def ap_at_k(ranked, relevant: Collection[str], k: int = 100) -> Optional[float]:
    """Average precision truncated at ``k``; ``None`` when nothing is relevant.

    ``ranked`` is a :class:`RankedResult` or a plain sequence of ids.
    Normalised by ``min(len(relevant), k)``.
    """
    ids = ranked.ids if isinstance(ranked, RankedResult) else list(ranked)
    relevant = set(relevant)
    if not relevant:
        return None
    hits = 0
    total = 0.0
    for i, gid in enumerate(ids[:k], start=1):
        if gid in relevant:
            hits += 1
            total += hits / i
    return total / min(len(relevant), k)


@dataclass(frozen=True)
class EvalSummary:
    mean_ap: float
    per_query: Tuple[Tuple[str, Optional[float]], ...]
    k: int = 100

    @property
    def n_queries(self) -> int:
        """Queries that count towards the mean."""
        return sum(ap is not None for _, ap in self.per_query)

    @property
    def n_undefined(self) -> int:
        return len(self.per_query) - self.n_queries

    def result_line(self) -> str:
        return f"RESULT map@{self.k}={self.mean_ap!r} queries={self.n_queries}"

    def to_text(self) -> str:
        lines = [f"query={qid} ap={'undefined' if ap is None else repr(ap)}" for qid, ap in self.per_query]
        lines.append(
            f"SUMMARY map@{self.k}={self.mean_ap!r} defined_queries={self.n_queries} "
            f"undefined_queries={self.n_undefined}"
        )
        lines.append(self.result_line())
        return "\n".join(lines) + "\n"


def mean_defined(aps: Sequence[Optional[float]]) -> float:
    """Mean over defined APs (``nan`` if none); exact summation keeps it order-free."""
    defined = [a for a in aps if a is not None]
    if not defined:
        return float("nan")
    return math.fsum(defined) / len(defined)


def evaluate(index: RetrievalIndex, queries: Sequence[LabeledEmbedding], k: int = 100) -> EvalSummary:
    queries = sorted(queries, key=lambda r: r.id)
    check_unique_ids(queries)
    per_query = []
    if queries and len(index):
        Q = l2_normalize_rows(stack_vectors(queries))
        if Q.shape[1] != index.dim:
            raise DimMismatchError(f"query dim {Q.shape[1]} != index dim {index.dim}")
        sims = np.clip(Q @ index.vectors.T, -1.0, 1.0)
    id_pos = {gid: i for i, gid in enumerate(index.ids)}
    for qi, q in enumerate(queries):
        relevant_mask = index.labels == q.label
        self_pos = id_pos.get(q.id)
        if self_pos is not None:
            relevant_mask = relevant_mask.copy()
            relevant_mask[self_pos] = False
        relevant = {index.ids[i] for i in np.flatnonzero(relevant_mask)}
        if not relevant:
            per_query.append((q.id, None))
            continue
        top = _ranked_positions(index, sims[qi], k, q.id if self_pos is not None else None)
        per_query.append((q.id, ap_at_k([index.ids[i] for i in top], relevant, k)))
    return EvalSummary(mean_defined([ap for _, ap in per_query]), tuple(per_query), k)


def _aligned(a: Sequence[LabeledEmbedding], b: Sequence[LabeledEmbedding], what: str):
    a = sorted(a, key=lambda r: r.id)
    b = sorted(b, key=lambda r: r.id)
    if [r.id for r in a] != [r.id for r in b]:
        raise IdMisalignmentError(f"{what}: the two models cover different ids")
    if [r.label for r in a] != [r.label for r in b]:
        raise IdMisalignmentError(f"{what}: labels disagree between the two models")
    return a, b


def fuse(a: Sequence[LabeledEmbedding], b: Sequence[LabeledEmbedding], what: str = "rows") -> List[LabeledEmbedding]:
    """Per-id concatenation of two models' unit embeddings, renormalized."""
    a, b = _aligned(a, b, what)
    return [
        LabeledEmbedding(ra.id, ra.label, concat_embeddings(l2_normalize(ra.vector), l2_normalize(rb.vector)))
        for ra, rb in zip(a, b)
    ]


def _index_rows(index: RetrievalIndex) -> List[LabeledEmbedding]:
    return [LabeledEmbedding(i, int(l), v) for i, l, v in zip(index.ids, index.labels, index.vectors)]


def ensemble_evaluate(
    index_a: RetrievalIndex,
    index_b: RetrievalIndex,
    queries_a: Sequence[LabeledEmbedding],
    queries_b: Sequence[LabeledEmbedding],
    k: int = 100,
) -> EvalSummary:
    """Evaluate the concatenation of two models' embeddings."""
    fused_index = build_index(fuse(_index_rows(index_a), _index_rows(index_b), "gallery"))
    return evaluate(fused_index, fuse(queries_a, queries_b, "queries"), k)


class CosineRetriever(BaseEstimator):
    """Array-facing retrieval: ``fit(gallery, labels)``, ``kneighbors``, ``score``.

    ``score(X, y)`` is mAP@k with relevance defined by equal labels.
    """

    def __init__(self, k: int = 100):
        self.k = k

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        width = len(str(max(len(X), 1)))
        self.index_ = build_index(
            [LabeledEmbedding(f"{i:0{width}d}", int(l), x) for i, (x, l) in enumerate(zip(X, np.asarray(y)))]
        )
        return self

    def kneighbors(self, X, k: Optional[int] = None):
        """``(similarities, gallery row indices)`` for each query row."""
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float64)
        k = self.k if k is None else k
        sims, idx = [], []
        for x in X:
            res = search(self.index_, as_embedding(x), k, exclude_self=False)
            sims.append([s for _, s in res.hits])
            idx.append([int(g) for g, _ in res.hits])
        return np.array(sims), np.array(idx)

    def score(self, X, y) -> float:
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float64)
        queries = [LabeledEmbedding(f"query-{i}", int(l), x) for i, (x, l) in enumerate(zip(X, np.asarray(y)))]
        return evaluate(self.index_, queries, self.k).mean_ap
