"""Trust-network and ratings ingestion.

Line-oriented loaders turn plain text files into immutable in-memory
structures: a directed trust graph over dense user indices, its binary
adjacency matrix, degree vectors, and a ratings table sharing the graph's
user index space. Users that only rate (no trust edges) get fresh indices
appended after the graph users; they can never appear as anyone's
neighbor.

File formats (UTF-8, blank lines and '#' comments skipped):
  trust:   ``source target [weight]`` -- the optional weight must parse as
           a number and is ignored (edges are binary)
  ratings: ``user item rating`` with rating in [1, 5]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import sparse

DEGREE_MODES = ("in", "out", "combined")

RATING_MIN = 1.0
RATING_MAX = 5.0


class IngestError(ValueError):
    """Malformed input line or unusable stream; carries a 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


def _data_lines(source: Iterable[str]):
    """Yield (line_number, tokens) for non-blank, non-comment lines."""
    for ln, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield ln, line.split()


@dataclass(frozen=True, eq=False)
class TrustGraph:
    """Directed trust network over dense user indices [0, num_users).

    ``src[k] -> dst[k]`` is the k-th edge; edges are deduplicated,
    self-loop free and sorted by (src, dst). External user ids are mapped
    to internal indices in first-seen order over kept edges, so ids that
    only ever appear in dropped self-loops are not registered.
    """

    num_users: int
    src: np.ndarray
    dst: np.ndarray
    external_to_internal: dict[int, int]
    internal_to_external: np.ndarray
    self_loops_dropped: int
    duplicate_edges_dropped: int
    edge_lines: int

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Edge list as (source_index, target_index) pairs (fresh list)."""
        return list(zip(self.src.tolist(), self.dst.tolist()))


def load_trust_edges(source: Iterable[str]) -> TrustGraph:
    """Parse a trust edge stream into a TrustGraph.

    Self-loops and duplicate edges are dropped silently but counted.
    Raises IngestError on malformed lines (token count, non-integer ids,
    non-numeric weight) and when no usable edge remains.
    """
    ext_pairs: list[tuple[int, int]] = []
    self_loops = 0
    edge_lines = 0
    for ln, toks in _data_lines(source):
        if len(toks) not in (2, 3):
            raise IngestError(
                f"trust line {ln}: expected 'source target [weight]', got {len(toks)} tokens",
                ln,
            )
        try:
            s, t = int(toks[0]), int(toks[1])
        except ValueError:
            raise IngestError(f"trust line {ln}: user ids must be integers", ln) from None
        if len(toks) == 3:
            try:
                float(toks[2])
            except ValueError:
                raise IngestError(f"trust line {ln}: weight must be numeric", ln) from None
        edge_lines += 1
        if s == t:
            self_loops += 1
            continue
        ext_pairs.append((s, t))
    if not ext_pairs:
        raise IngestError("no edges")

    ext_to_int: dict[int, int] = {}
    int_to_ext: list[int] = []
    for s, t in ext_pairs:
        for e in (s, t):
            if e not in ext_to_int:
                ext_to_int[e] = len(int_to_ext)
                int_to_ext.append(e)
    n = len(int_to_ext)
    src = np.fromiter((ext_to_int[s] for s, _ in ext_pairs), dtype=np.int64, count=len(ext_pairs))
    dst = np.fromiter((ext_to_int[t] for _, t in ext_pairs), dtype=np.int64, count=len(ext_pairs))
    codes = np.unique(src * n + dst)
    duplicates = int(src.size - codes.size)
    return TrustGraph(
        num_users=n,
        src=codes // n,
        dst=codes % n,
        external_to_internal=ext_to_int,
        internal_to_external=np.asarray(int_to_ext, dtype=np.int64),
        self_loops_dropped=self_loops,
        duplicate_edges_dropped=duplicates,
        edge_lines=edge_lines,
    )


class RatingsTable:
    """(user, item, rating) triples with per-user and per-item lookups.

    Shares the trust graph's user index space; raters unknown to the graph
    sit at indices >= the graph's user count. At most one rating per
    (user, item) pair is kept (last occurrence wins on duplicate input).
    All structures are built once and treated as read-only.
    """

    def __init__(self, user_idx, item_idx, ratings, num_users, num_items,
                 user_external_to_internal, user_internal_to_external,
                 item_external_to_internal, item_internal_to_external,
                 duplicate_ratings_dropped=0, rating_lines=0):
        self.user_idx = np.asarray(user_idx, dtype=np.int64)
        self.item_idx = np.asarray(item_idx, dtype=np.int64)
        self.ratings = np.asarray(ratings, dtype=np.float64)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.user_external_to_internal = user_external_to_internal
        self.user_internal_to_external = np.asarray(user_internal_to_external, dtype=np.int64)
        self.item_external_to_internal = item_external_to_internal
        self.item_internal_to_external = np.asarray(item_internal_to_external, dtype=np.int64)
        self.duplicate_ratings_dropped = int(duplicate_ratings_dropped)
        self.rating_lines = int(rating_lines)
        self.matrix = sparse.csr_matrix(
            (self.ratings, (self.user_idx, self.item_idx)),
            shape=(self.num_users, self.num_items),
        )
        self.matrix.sort_indices()
        self.item_counts = np.bincount(self.item_idx, minlength=self.num_items)
        self.user_counts = np.bincount(self.user_idx, minlength=self.num_users)
        self._popularity_order = None

    @property
    def num_ratings(self) -> int:
        return int(self.ratings.size)

    @property
    def popularity_order(self) -> np.ndarray:
        """Items with at least one rating, by rating count desc then index asc.

        Computed once on first use; the table is immutable, so the order
        never goes stale.
        """
        if self._popularity_order is None:
            items = np.nonzero(self.item_counts)[0]
            order = np.lexsort((items, -self.item_counts[items]))
            self._popularity_order = items[order]
        return self._popularity_order

    def user_items(self, user: int) -> np.ndarray:
        """Item indices rated by ``user`` in this table."""
        m = self.matrix
        return m.indices[m.indptr[user]:m.indptr[user + 1]]

    def user_ratings(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """(item indices, rating values) for ``user``."""
        m = self.matrix
        lo, hi = m.indptr[user], m.indptr[user + 1]
        return m.indices[lo:hi], m.data[lo:hi]

    def restricted(self, keep: np.ndarray) -> "RatingsTable":
        """Copy containing only the triples where ``keep`` is True.

        Dimensions and id maps are shared, so indices stay comparable
        across the original and the restriction.
        """
        keep = np.asarray(keep, dtype=bool)
        return RatingsTable(
            self.user_idx[keep], self.item_idx[keep], self.ratings[keep],
            self.num_users, self.num_items,
            self.user_external_to_internal, self.user_internal_to_external,
            self.item_external_to_internal, self.item_internal_to_external,
        )


def load_ratings(source: Iterable[str], graph: TrustGraph) -> RatingsTable:
    """Parse a ratings stream against an ingested trust graph.

    Users absent from the graph get fresh indices appended after the graph
    users. Ratings outside [1, 5] and malformed lines raise IngestError
    with the offending line number.
    """
    user_map = dict(graph.external_to_internal)
    user_ext = [int(e) for e in graph.internal_to_external]
    item_map: dict[int, int] = {}
    item_ext: list[int] = []
    kept: dict[tuple[int, int], float] = {}
    duplicates = 0
    lines = 0
    for ln, toks in _data_lines(source):
        if len(toks) != 3:
            raise IngestError(
                f"rating line {ln}: expected 'user item rating', got {len(toks)} tokens", ln)
        try:
            u, i = int(toks[0]), int(toks[1])
        except ValueError:
            raise IngestError(f"rating line {ln}: user and item ids must be integers", ln) from None
        try:
            r = float(toks[2])
        except ValueError:
            raise IngestError(f"rating line {ln}: rating must be numeric", ln) from None
        if not (RATING_MIN <= r <= RATING_MAX):
            raise IngestError(
                f"rating line {ln}: rating {toks[2]} outside [{RATING_MIN:g}, {RATING_MAX:g}]", ln)
        lines += 1
        if u not in user_map:
            user_map[u] = len(user_ext)
            user_ext.append(u)
        if i not in item_map:
            item_map[i] = len(item_ext)
            item_ext.append(i)
        key = (user_map[u], item_map[i])
        if key in kept:
            duplicates += 1
        kept[key] = r

    count = len(kept)
    user_idx = np.fromiter((k[0] for k in kept), dtype=np.int64, count=count)
    item_idx = np.fromiter((k[1] for k in kept), dtype=np.int64, count=count)
    values = np.fromiter(kept.values(), dtype=np.float64, count=count)
    return RatingsTable(
        user_idx, item_idx, values,
        num_users=len(user_ext), num_items=len(item_ext),
        user_external_to_internal=user_map,
        user_internal_to_external=np.asarray(user_ext, dtype=np.int64),
        item_external_to_internal=item_map,
        item_internal_to_external=np.asarray(item_ext, dtype=np.int64),
        duplicate_ratings_dropped=duplicates,
        rating_lines=lines,
    )


def ingestion_summary(graph: TrustGraph, ratings: RatingsTable) -> dict:
    """The single-line ingest report: totals plus dropped-line counters.

    ``users`` counts every known user, i.e. graph users plus raters that
    have no trust edges.
    """
    return {
        "users": ratings.num_users,
        "edges": graph.num_edges,
        "self_loops_dropped": graph.self_loops_dropped,
        "duplicate_edges_dropped": graph.duplicate_edges_dropped,
        "ratings": ratings.num_ratings,
        "duplicate_ratings_dropped": ratings.duplicate_ratings_dropped,
    }


def adjacency(graph: TrustGraph) -> sparse.csr_matrix:
    """Binary adjacency matrix: A[i, j] = 1 iff i trusts j. CSR, float64."""
    data = np.ones(graph.num_edges, dtype=np.float64)
    A = sparse.csr_matrix((data, (graph.src, graph.dst)),
                          shape=(graph.num_users, graph.num_users))
    A.sort_indices()
    return A


@dataclass(frozen=True, eq=False)
class DegreeVector:
    """Per-user edge counts for one of the modes in DEGREE_MODES."""

    mode: str
    values: np.ndarray


def degrees(graph: TrustGraph, mode: str) -> DegreeVector:
    """Per-user in/out/combined degree counts."""
    if mode not in DEGREE_MODES:
        raise ValueError(f"degree mode must be one of {DEGREE_MODES}, not {mode!r}")
    out = np.bincount(graph.src, minlength=graph.num_users)
    inn = np.bincount(graph.dst, minlength=graph.num_users)
    if mode == "out":
        values = out
    elif mode == "in":
        values = inn
    else:
        values = inn + out
    return DegreeVector(mode, values.astype(np.int64))


def degree_table(graph: TrustGraph) -> dict[str, DegreeVector]:
    """All three degree vectors keyed by mode."""
    return {mode: degrees(graph, mode) for mode in DEGREE_MODES}
