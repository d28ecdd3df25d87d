"""Cold-start evaluation: holdout split, ranking metrics, grid runner.

The protocol: users with fewer training ratings than a threshold become
evaluation targets and have *all* their ratings held out, every approach
ranks items for each target from the remaining train ratings, and
precision / recall / binary nDCG are macro-averaged over exactly the
target users (empty recommendation lists score zero, they are never
skipped). The grid runner evaluates the baselines plus every valid KS
pipeline cell on one shared split, reusing the expensive walk-sum matrix
across cells that differ only in normalization choices.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_core import RatingsTable, TrustGraph, adjacency, degree_table
from .recommender import Approach, recommend
from .similarity import (DEFAULT_BLOCK_SIZE, DEFAULT_MAX_ENTRIES, DEGREE_NORMS,
                         ROW_NORMS, PipelineConfig, SimilarityMatrix,
                         apply_stages, jaccard_similarity, katz_truncated,
                         load_similarity, save_similarity)

METRICS_HEADER = ("approach", "l_max", "degree_norm", "row_norm", "boost",
                  "n", "ndcg", "recall", "precision", "users_evaluated")
PR_CURVE_HEADER = ("approach", "n", "recall", "precision")
USER_DETAIL_HEADER = ("approach", "user", "n", "ndcg", "recall", "precision")


def _fmt(x: float) -> str:
    """Canonical float formatting for CSV output (repr-stable, short)."""
    return format(float(x), ".12g")


@dataclass(frozen=True, eq=False)
class EvalSplit:
    """Train ratings plus per-target held-out relevant item sets.

    ``test`` maps target user index to a sorted array of relevant item
    indices; ``target_users`` is ascending and keys exactly ``test``.
    """

    train: RatingsTable
    test: dict[int, np.ndarray]
    target_users: np.ndarray
    threshold: int


def cold_start_split(ratings: RatingsTable, threshold: int, *,
                     min_rating: float | None = None) -> EvalSplit:
    """Hold out every rating of each user with fewer than ``threshold``.

    Users with 1 <= rating count < threshold become targets and keep no
    train ratings at all: neighbor scoring never reads the target's own
    rows, so the full holdout costs nothing and maximizes test signal.
    With ``min_rating``, only held-out ratings >= min_rating count as
    relevant, and users left without any relevant item are not targets
    (their ratings stay in train).
    """
    if threshold < 2:
        raise ValueError("threshold must be >= 2")
    counts = ratings.user_counts
    is_target = (counts >= 1) & (counts < threshold)
    if min_rating is not None:
        qualifying = np.bincount(ratings.user_idx[ratings.ratings >= min_rating],
                                 minlength=ratings.num_users)
        is_target &= qualifying >= 1
    targets = np.nonzero(is_target)[0].astype(np.int64)
    if targets.size == 0:
        raise ValueError(f"no cold-start users at threshold {threshold}")
    held = is_target[ratings.user_idx]
    train = ratings.restricted(~held)
    relevant = held if min_rating is None else held & (ratings.ratings >= min_rating)
    test: dict[int, list[int]] = {}
    for u, it in zip(ratings.user_idx[relevant].tolist(),
                     ratings.item_idx[relevant].tolist()):
        test.setdefault(u, []).append(it)
    test_arrays = {u: np.asarray(sorted(v), dtype=np.int64) for u, v in test.items()}
    return EvalSplit(train=train, test=test_arrays,
                     target_users=targets, threshold=int(threshold))


def _recommended_ids(recommended) -> list[int]:
    return [int(entry[0]) if isinstance(entry, (tuple, list)) else int(entry)
            for entry in recommended]


def precision_at_n(recommended, relevant, n: int) -> float:
    """Fraction of the top n that is relevant; short lists count misses.

    ``recommended`` may be (item, score) pairs or bare item ids.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rel = {int(i) for i in relevant}
    hits = sum(1 for it in _recommended_ids(recommended)[:n] if it in rel)
    return hits / n


def recall_at_n(recommended, relevant, n: int) -> float:
    """Fraction of the relevant set found in the top n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rel = {int(i) for i in relevant}
    if not rel:
        raise ValueError("relevant set must be nonempty")
    hits = sum(1 for it in _recommended_ids(recommended)[:n] if it in rel)
    return hits / len(rel)


def ndcg_at_n(recommended, relevant, n: int) -> float:
    """Binary-relevance nDCG@n with 1 / log2(rank + 1) discounts.

    The ideal DCG places min(n, |relevant|) hits at the top ranks, so a
    user with fewer relevant items than n can still reach 1.0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rel = {int(i) for i in relevant}
    if not rel:
        raise ValueError("relevant set must be nonempty")
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, it in enumerate(_recommended_ids(recommended)[:n], start=1)
              if it in rel)
    ideal_hits = min(n, len(rel))
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, ideal_hits + 1))
    return dcg / idcg


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """Macro-averaged metrics for one approach, indexed by n - 1.

    The l_max / degree_norm / row_norm / boost fields are None for
    baselines. ``user_detail`` (optional) holds per-user rows
    (external user id, n, ndcg, recall, precision).
    """

    approach: str
    l_max: int | None
    degree_norm: str | None
    row_norm: str | None
    boost: bool | None
    ndcg: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    users_evaluated: int
    user_detail: list[tuple[int, int, float, float, float]] | None = None


class _EvalContext:
    """Shared state for evaluating many approaches on one graph + split.

    Builds the adjacency and degree vectors once, caches the walk-sum
    matrix per l_max (restricted to target rows) and the Jaccard matrix,
    and optionally persists those to ``cache_dir`` keyed by a fingerprint
    of the graph and target set.
    """

    def __init__(self, graph: TrustGraph, split: EvalSplit, *, alpha: float,
                 k: int, n_max: int, fallback: str = "none", threads: int = 1,
                 max_entries: int = DEFAULT_MAX_ENTRIES,
                 block_size: int = DEFAULT_BLOCK_SIZE,
                 cache_dir=None, collect_user_detail: bool = False):
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        self.graph = graph
        self.split = split
        self.alpha = float(alpha)
        self.k = int(k)
        self.n_max = int(n_max)
        self.fallback = fallback
        self.threads = int(threads)
        self.max_entries = int(max_entries)
        self.block_size = int(block_size)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.collect_user_detail = bool(collect_user_detail)
        self.A = adjacency(graph)
        self.degrees = degree_table(graph)
        targets = split.target_users
        self.graph_targets = targets[targets < graph.num_users]
        self._katz: dict[int, "np.ndarray"] = {}
        self._jaccard = None
        self._fingerprint = None
        ranks = np.arange(2, self.n_max + 2, dtype=np.float64)
        self.discounts = 1.0 / np.log2(ranks)
        self.cum_discounts = np.cumsum(self.discounts)

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(np.int64(self.graph.num_users).tobytes())
            h.update(self.graph.src.tobytes())
            h.update(self.graph.dst.tobytes())
            h.update(self.graph_targets.tobytes())
            self._fingerprint = h.hexdigest()[:16]
        return self._fingerprint

    def _cached(self, name: str, meta: dict, build):
        """Disk-backed memo: reuse ``name``.npz when its metadata matches."""
        if self.cache_dir is None:
            return build()
        path = self.cache_dir / f"{name}.npz"
        if path.exists():
            try:
                sim, stored = load_similarity(path)
            except (OSError, ValueError, KeyError):
                sim, stored = None, {}
            if sim is not None and all(stored.get(key) == value for key, value in meta.items()):
                return sim.matrix
        matrix = build()
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        save_similarity(path, SimilarityMatrix(matrix=matrix, stages=(name,)),
                        extra_meta=meta)
        return matrix

    def katz_base(self, l_max: int):
        if l_max not in self._katz:
            meta = {"kind": "katz", "alpha": self.alpha, "l_max": int(l_max),
                    "fingerprint": self.fingerprint()}
            name = f"katz_l{l_max}_a{self.alpha:g}_{self.fingerprint()}"
            self._katz[l_max] = self._cached(name, meta, lambda: katz_truncated(
                self.A, self.alpha, l_max, rows=self.graph_targets,
                max_entries=self.max_entries, block_size=self.block_size,
                threads=self.threads))
        return self._katz[l_max]

    def jaccard_matrix(self):
        if self._jaccard is None:
            meta = {"kind": "jaccard", "fingerprint": self.fingerprint()}
            name = f"jaccard_{self.fingerprint()}"
            self._jaccard = self._cached(name, meta, lambda: jaccard_similarity(
                self.A, rows=self.graph_targets))
        return self._jaccard

    def similarity_for(self, approach: Approach):
        if approach.kind == "mp":
            return None
        if approach.kind == "trust_exp":
            return self.A
        if approach.kind == "trust_jac":
            return self.jaccard_matrix()
        cfg = approach.config
        base = self.katz_base(cfg.l_max)
        return apply_stages(base, self.A, self.degrees, cfg,
                            rows=self.graph_targets).matrix


def _evaluate(ctx: _EvalContext, approach: Approach) -> MetricsReport:
    similarity = ctx.similarity_for(approach)
    n_max = ctx.n_max
    sum_ndcg = np.zeros(n_max)
    sum_recall = np.zeros(n_max)
    sum_precision = np.zeros(n_max)
    detail: list | None = [] if ctx.collect_user_detail else None
    train = ctx.split.train
    positions = np.arange(1, n_max + 1, dtype=np.float64)
    for u in ctx.split.target_users.tolist():
        ranked = recommend(approach, u, similarity, train,
                           n=n_max, k=ctx.k, fallback=ctx.fallback)
        relevant = ctx.split.test[u]
        hits = np.zeros(n_max)
        if ranked:
            rel_set = set(relevant.tolist())
            for rank0, (item, _score) in enumerate(ranked):
                if item in rel_set:
                    hits[rank0] = 1.0
        cum_hits = np.cumsum(hits)
        user_precision = cum_hits / positions
        user_recall = cum_hits / relevant.size
        dcg = np.cumsum(hits * ctx.discounts)
        idcg = ctx.cum_discounts[np.minimum(np.arange(1, n_max + 1), relevant.size) - 1]
        user_ndcg = dcg / idcg
        sum_ndcg += user_ndcg
        sum_recall += user_recall
        sum_precision += user_precision
        if detail is not None:
            ext = int(train.user_internal_to_external[u])
            for n in range(1, n_max + 1):
                detail.append((ext, n, float(user_ndcg[n - 1]),
                               float(user_recall[n - 1]), float(user_precision[n - 1])))
    count = int(ctx.split.target_users.size)
    cfg = approach.config
    return MetricsReport(
        approach=approach.name,
        l_max=cfg.l_max if cfg else None,
        degree_norm=cfg.degree_norm if cfg else None,
        row_norm=cfg.row_norm if cfg else None,
        boost=cfg.boost if cfg else None,
        ndcg=sum_ndcg / count,
        recall=sum_recall / count,
        precision=sum_precision / count,
        users_evaluated=count,
        user_detail=detail,
    )


def evaluate_approach(approach: Approach, graph: TrustGraph, split: EvalSplit, *,
                      k: int = 40, n_max: int = 10, alpha: float = 0.5,
                      fallback: str = "none", threads: int = 1,
                      max_entries: int = DEFAULT_MAX_ENTRIES,
                      block_size: int = DEFAULT_BLOCK_SIZE,
                      cache_dir=None, collect_user_detail: bool = False) -> MetricsReport:
    """Evaluate one approach over every target user of the split.

    For a KS approach, alpha and k come from its PipelineConfig and the
    keyword values are ignored.
    """
    if approach.kind == "ks":
        alpha = approach.config.alpha
        k = approach.config.k
    ctx = _EvalContext(graph, split, alpha=alpha, k=k, n_max=n_max,
                       fallback=fallback, threads=threads,
                       max_entries=max_entries, block_size=block_size,
                       cache_dir=cache_dir, collect_user_detail=collect_user_detail)
    return _evaluate(ctx, approach)


def grid_approaches(l_values=(1, 2), *, alpha: float = 0.5, k: int = 40) -> list[Approach]:
    """Baselines plus the full valid, deduplicated KS grid.

    Cells with boost but no row normalization are invalid and skipped.
    With l_max <= 1 every boosted cell provably collapses to the plain
    adjacency matrix (all walk-sum entries sit on strong ties, so nothing
    survives their removal), whatever the normalization modes; that family
    is emitted once, canonically as degree_norm="none", row_norm="max".
    """
    approaches = [Approach(kind="mp"), Approach(kind="trust_exp"),
                  Approach(kind="trust_jac")]
    for l_max in l_values:
        for degree_norm in DEGREE_NORMS:
            for row_norm in ROW_NORMS:
                for boost_flag in (False, True):
                    if boost_flag and row_norm == "none":
                        continue
                    if boost_flag and l_max <= 1 and not (degree_norm == "none"
                                                          and row_norm == "max"):
                        continue
                    approaches.append(Approach(kind="ks", config=PipelineConfig(
                        alpha=alpha, l_max=l_max, degree_norm=degree_norm,
                        row_norm=row_norm, boost=boost_flag, k=k)))
    return approaches


def run_grid(graph: TrustGraph, split: EvalSplit, *, alpha: float = 0.5,
             k: int = 40, n_max: int = 10, l_values=(1, 2),
             fallback: str = "none", threads: int = 1,
             max_entries: int = DEFAULT_MAX_ENTRIES,
             block_size: int = DEFAULT_BLOCK_SIZE,
             cache_dir=None, collect_user_detail: bool = False) -> list[MetricsReport]:
    """Evaluate the whole grid on one split; one report per approach.

    The walk-sum matrix is computed once per l_max (restricted to target
    rows) and shared by every cell with that l_max.
    """
    ctx = _EvalContext(graph, split, alpha=alpha, k=k, n_max=n_max,
                       fallback=fallback, threads=threads,
                       max_entries=max_entries, block_size=block_size,
                       cache_dir=cache_dir, collect_user_detail=collect_user_detail)
    return [_evaluate(ctx, approach)
            for approach in grid_approaches(l_values, alpha=alpha, k=k)]


def emit_pr_curve(reports, n_range) -> list[tuple[str, int, float, float]]:
    """Rows (approach, n, recall, precision) for external plotting.

    Raises ValueError when a report lacks metrics for a requested n.
    """
    rows = []
    for report in reports:
        for n in n_range:
            if not 1 <= n <= report.recall.size:
                raise ValueError(
                    f"report {report.approach} has no metrics for n={n}")
            rows.append((report.approach, int(n),
                         float(report.recall[n - 1]), float(report.precision[n - 1])))
    return rows


def rank_summary(reports, n: int = 10) -> list[tuple[str, float]]:
    """(approach, ndcg@n) sorted by ndcg desc, then name asc."""
    pairs = []
    for report in reports:
        if not 1 <= n <= report.ndcg.size:
            raise ValueError(f"report {report.approach} has no metrics for n={n}")
        pairs.append((report.approach, float(report.ndcg[n - 1])))
    pairs.sort(key=lambda pair: (-pair[1], pair[0]))
    return pairs


def write_metrics_csv(reports, path) -> None:
    """Metrics table, one row per (approach, n); LF line endings, UTF-8.

    Baseline rows leave the pipeline columns empty; KS rows carry the
    structural config so a row is traceable back to its grid cell.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for report in reports:
            meta = [report.approach,
                    "" if report.l_max is None else str(report.l_max),
                    report.degree_norm or "",
                    report.row_norm or "",
                    "" if report.boost is None else ("yes" if report.boost else "no")]
            for n in range(1, report.ndcg.size + 1):
                writer.writerow(meta + [str(n), _fmt(report.ndcg[n - 1]),
                                        _fmt(report.recall[n - 1]),
                                        _fmt(report.precision[n - 1]),
                                        str(report.users_evaluated)])


def write_pr_curve_csv(rows, path) -> None:
    """Curve rows as produced by ``emit_pr_curve``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PR_CURVE_HEADER)
        for approach, n, recall, precision in rows:
            writer.writerow([approach, str(int(n)), _fmt(recall), _fmt(precision)])


def write_user_detail_csv(reports, path) -> None:
    """Per-user metric rows for every report that collected them."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(USER_DETAIL_HEADER)
        for report in reports:
            for user, n, ndcg, recall, precision in report.user_detail or ():
                writer.writerow([report.approach, str(user), str(n),
                                 _fmt(ndcg), _fmt(recall), _fmt(precision)])
