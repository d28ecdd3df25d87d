"""Trust-network walk-similarity recommender toolkit.

Computes truncated walk-sum similarities over a directed trust graph,
normalizes and boosts them, recommends items through similarity-weighted
k-NN, and evaluates everything against popularity and direct-trust
baselines on a cold-start holdout.
"""

__version__ = "0.1.0"

from .graph_core import (DEGREE_MODES, DegreeVector, IngestError, RatingsTable,
                         TrustGraph, adjacency, degree_table, degrees,
                         ingestion_summary, load_ratings, load_trust_edges)
from .similarity import (DEGREE_NORMS, DEFAULT_MAX_ENTRIES, ROW_NORMS,
                         BudgetExceededError, PipelineConfig, SimilarityMatrix,
                         apply_stages, boost, build_similarity, degree_normalize,
                         descriptor, jaccard_similarity, katz_truncated,
                         load_similarity, parse_descriptor, restrict_rows,
                         row_normalize, save_similarity, top_k_neighbors,
                         zero_strong_ties)
from .recommender import (BASELINES, Approach, approach_from_name, recommend,
                          recommend_knn, recommend_most_popular)
from .evaluation import (EvalSplit, MetricsReport, cold_start_split,
                         emit_pr_curve, evaluate_approach, grid_approaches,
                         ndcg_at_n, precision_at_n, rank_summary, recall_at_n,
                         run_grid, write_metrics_csv, write_pr_curve_csv,
                         write_user_detail_csv)

__all__ = [
    "__version__",
    # graph_core
    "DEGREE_MODES", "DegreeVector", "IngestError", "RatingsTable", "TrustGraph",
    "adjacency", "degree_table", "degrees", "ingestion_summary",
    "load_ratings", "load_trust_edges",
    # similarity
    "DEGREE_NORMS", "DEFAULT_MAX_ENTRIES", "ROW_NORMS", "BudgetExceededError",
    "PipelineConfig", "SimilarityMatrix", "apply_stages", "boost",
    "build_similarity", "degree_normalize", "descriptor", "jaccard_similarity",
    "katz_truncated", "load_similarity", "parse_descriptor", "restrict_rows",
    "row_normalize", "save_similarity", "top_k_neighbors", "zero_strong_ties",
    # recommender
    "BASELINES", "Approach", "approach_from_name", "recommend",
    "recommend_knn", "recommend_most_popular",
    # evaluation
    "EvalSplit", "MetricsReport", "cold_start_split", "emit_pr_curve",
    "evaluate_approach", "grid_approaches", "ndcg_at_n", "precision_at_n",
    "rank_summary", "recall_at_n", "run_grid", "write_metrics_csv",
    "write_pr_curve_csv", "write_user_detail_csv",
]
