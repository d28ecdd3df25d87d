"""Turn neighbor lists plus training ratings into ranked top-n item lists.

The neighbor-based recommender scores each candidate item by the
similarity-weighted sum of the neighbors' ratings for it; the popularity
baseline just counts training ratings. Both exclude items the target user
already rated in train and break ties the same way, so rankings are fully
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_core import RatingsTable
from .similarity import (PipelineConfig, SimilarityMatrix, descriptor,
                         parse_descriptor, top_k_neighbors)

BASELINES = ("mp", "trust_exp", "trust_jac")

_BASELINE_NAMES = {"mp": "MP", "trust_exp": "Trust_exp", "trust_jac": "Trust_jac"}

FALLBACK_MODES = ("none", "mp")


@dataclass(frozen=True)
class Approach:
    """One similarity source: a KS pipeline config or a named baseline.

    ``kind`` is "ks" or one of BASELINES. trust_exp reads neighbors
    straight off the adjacency matrix (everyone the user trusts,
    similarity 1), trust_jac off the out-neighbor Jaccard matrix, and mp
    ignores similarity entirely.
    """

    kind: str
    config: PipelineConfig | None = None

    def __post_init__(self):
        if self.kind == "ks":
            if self.config is None:
                raise ValueError("ks approach needs a PipelineConfig")
        elif self.kind not in BASELINES:
            raise ValueError(f"unknown approach kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.kind == "ks":
            return descriptor(self.config)
        return _BASELINE_NAMES[self.kind]


def approach_from_name(name: str, *, alpha: float = 0.5, k: int = 40) -> Approach:
    """Build an Approach from a baseline name or a KS descriptor string."""
    low = name.strip().lower()
    if low in BASELINES:
        return Approach(kind=low)
    return Approach(kind="ks", config=parse_descriptor(name, alpha=alpha, k=k))


def recommend_knn(user: int, neighbors, train: RatingsTable, n: int, *,
                  min_rating: float | None = None) -> list[tuple[int, float]]:
    """Similarity-weighted rating sums over the neighbors' training items.

    score(item) = sum over neighbors v that rated it of sim(v) * rating(v, item)

    Items the target user rated in ``train`` are excluded. With
    ``min_rating``, neighbor ratings below it contribute nothing. Ordering
    is score desc, then training popularity desc, then item index asc;
    users with no neighbors (or neighbors with no usable ratings) get an
    empty list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not neighbors:
        return []
    m = train.matrix
    cols_parts, val_parts = [], []
    for v, sim in neighbors:
        lo, hi = m.indptr[v], m.indptr[v + 1]
        item_cols = m.indices[lo:hi]
        values = m.data[lo:hi]
        if min_rating is not None:
            keep = values >= min_rating
            item_cols, values = item_cols[keep], values[keep]
        cols_parts.append(item_cols)
        val_parts.append(values * sim)
    cols = np.concatenate(cols_parts)
    vals = np.concatenate(val_parts)
    if cols.size == 0:
        return []
    items, inverse = np.unique(cols, return_inverse=True)
    scores = np.bincount(inverse, weights=vals)
    if 0 <= user < train.num_users:
        rated = train.user_items(user)
        if rated.size:
            keep = ~np.isin(items, rated)
            items, scores = items[keep], scores[keep]
    if items.size == 0:
        return []
    popularity = train.item_counts[items]
    order = np.lexsort((items, -popularity, -scores))[:n]
    return [(int(items[i]), float(scores[i])) for i in order]


def recommend_most_popular(train: RatingsTable, user: int, n: int) -> list[tuple[int, float]]:
    """Items ranked by training rating count, the user's own items excluded.

    Only items with at least one training rating appear; ties break on the
    lower item index. The returned score is the raw count.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = train.item_counts
    rated = set()
    if 0 <= user < train.num_users:
        rated = set(train.user_items(user).tolist())
    out = []
    for item in train.popularity_order:
        if int(item) in rated:
            continue
        out.append((int(item), float(counts[item])))
        if len(out) == n:
            break
    return out


def recommend(approach: Approach, user: int, similarity, train: RatingsTable, *,
              n: int, k: int | None = None, fallback: str = "none",
              min_rating: float | None = None) -> list[tuple[int, float]]:
    """Dispatch one user's recommendation through the chosen approach.

    ``similarity`` must match the approach: the pipeline output for ks,
    the adjacency matrix for trust_exp, the Jaccard matrix for trust_jac;
    it is ignored for mp. Users outside the matrix (raters without trust
    edges) have no neighbors and get an empty list -- unless
    ``fallback="mp"``, which swaps in the popularity ranking whenever the
    neighbor-based list comes back empty.
    """
    if fallback not in FALLBACK_MODES:
        raise ValueError(f"fallback must be one of {FALLBACK_MODES}, not {fallback!r}")
    if approach.kind == "mp":
        return recommend_most_popular(train, user, n)
    if k is None:
        k = approach.config.k if approach.kind == "ks" else None
    if k is None:
        raise ValueError("k is required for neighbor-based approaches")
    M = similarity.matrix if isinstance(similarity, SimilarityMatrix) else similarity
    if M is None:
        raise ValueError(f"approach {approach.name} needs a similarity matrix")
    if 0 <= user < M.shape[0]:
        neighbors = top_k_neighbors(M, user, k)
    else:
        neighbors = []
    ranked = recommend_knn(user, neighbors, train, n, min_rating=min_rating)
    if not ranked and fallback == "mp":
        ranked = recommend_most_popular(train, user, n)
    return ranked
