"""Command-line surface: ingest, evaluate, grid, curve, recommend.

All subcommands share one configuration scheme: built-in defaults, then a
JSON config file (``--config``), then explicit flags, later layers
overriding earlier ones. Failures print a single-line JSON object
(``{"error": ..., "message": ...}``) to stderr and exit nonzero, so
wrapping scripts can parse them.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (PR_CURVE_HEADER, cold_start_split, emit_pr_curve,
                         evaluate_approach, rank_summary, run_grid,
                         write_metrics_csv, write_pr_curve_csv,
                         write_user_detail_csv, _fmt)
from .graph_core import (RatingsTable, TrustGraph, adjacency, degree_table,
                         ingestion_summary, load_ratings, load_trust_edges)
from .recommender import FALLBACK_MODES, Approach, approach_from_name, recommend
from .similarity import (DEGREE_NORMS, ROW_NORMS, PipelineConfig,
                         build_similarity, jaccard_similarity)


class CLIError(ValueError):
    """User-facing configuration or input problem."""


@dataclass
class RunConfig:
    """Everything a run needs; JSON config files hold these same keys."""

    trust_path: str | None = None
    ratings_path: str | None = None
    alpha: float = 0.5
    l_max: int = 2
    degree_norm: str = "combined"
    row_norm: str = "max"
    boost: bool = True
    k: int = 40
    n_max: int = 10
    cold_start_threshold: int = 5
    fallback: str = "none"
    output_dir: str = "."
    seed: int = 0


_CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))
_STR_KEYS = {"trust_path", "ratings_path", "output_dir", "degree_norm",
             "row_norm", "fallback"}
_INT_KEYS = {"l_max", "k", "n_max", "cold_start_threshold", "seed"}


def _coerce(key: str, value):
    if key == "boost":
        if not isinstance(value, bool):
            raise CLIError(f"config key {key!r} must be true or false")
        return value
    if key == "alpha":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise CLIError(f"config key {key!r} must be a number")
        return float(value)
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise CLIError(f"config key {key!r} must be an integer")
        return int(value)
    if value is not None and not isinstance(value, str):
        raise CLIError(f"config key {key!r} must be a string")
    return value


def load_run_config(args) -> RunConfig:
    """Defaults, then the JSON config file, then flags. Later wins."""
    cfg = RunConfig()
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise CLIError(f"config file {config_path} must hold a JSON object")
        unknown = sorted(set(raw) - set(_CONFIG_KEYS))
        if unknown:
            raise CLIError(f"unknown config keys: {', '.join(unknown)}")
        cfg = replace(cfg, **{key: _coerce(key, value) for key, value in raw.items()})
    overrides = {}
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def validate_run_config(cfg: RunConfig, *, need_paths: bool = True) -> None:
    """Reject invalid combinations before any work starts.

    The pipeline fields must form a valid PipelineConfig even for commands
    that might not use them, so a bad config file fails fast everywhere.
    """
    PipelineConfig(alpha=cfg.alpha, l_max=cfg.l_max, degree_norm=cfg.degree_norm,
                   row_norm=cfg.row_norm, boost=cfg.boost, k=cfg.k)
    if cfg.n_max < 1:
        raise CLIError("n_max must be >= 1")
    if cfg.cold_start_threshold < 2:
        raise CLIError("cold_start_threshold must be >= 2")
    if cfg.fallback not in FALLBACK_MODES:
        raise CLIError(f"fallback must be one of {FALLBACK_MODES}, not {cfg.fallback!r}")
    if need_paths:
        if not cfg.trust_path:
            raise CLIError("trust file path is required (--trust or config trust_path)")
        if not cfg.ratings_path:
            raise CLIError("ratings file path is required (--ratings or config ratings_path)")
        for label, path in (("trust", cfg.trust_path), ("ratings", cfg.ratings_path)):
            if not Path(path).is_file():
                raise CLIError(f"{label} file not found: {path}")


def _resolve_threads(args) -> int:
    """Worker count: --threads flag, then TRUSTKATZ_THREADS, then cpu_count."""
    value = getattr(args, "threads", None)
    if value is None:
        env = os.environ.get("TRUSTKATZ_THREADS", "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise CLIError(f"TRUSTKATZ_THREADS must be an integer, got {env!r}") from None
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise CLIError("threads must be >= 1")
    return int(value)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _save_dataset_cache(path: Path, graph: TrustGraph, table: RatingsTable,
                        digest: str) -> None:
    meta = {
        "kind": "dataset", "digest": digest,
        "self_loops_dropped": graph.self_loops_dropped,
        "duplicate_edges_dropped": graph.duplicate_edges_dropped,
        "edge_lines": graph.edge_lines,
        "duplicate_ratings_dropped": table.duplicate_ratings_dropped,
        "rating_lines": table.rating_lines,
    }
    np.savez(path,
             header=np.array(json.dumps(meta, sort_keys=True)),
             src=graph.src, dst=graph.dst,
             graph_user_ext=graph.internal_to_external,
             rating_user=table.user_idx, rating_item=table.item_idx,
             rating_value=table.ratings,
             all_user_ext=table.user_internal_to_external,
             item_ext=table.item_internal_to_external)


def _load_dataset_cache(path: Path, digest: str):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["header"].item()))
            if meta.get("kind") != "dataset" or meta.get("digest") != digest:
                return None
            graph_user_ext = z["graph_user_ext"]
            graph = TrustGraph(
                num_users=int(graph_user_ext.size),
                src=z["src"], dst=z["dst"],
                external_to_internal={int(e): i for i, e in enumerate(graph_user_ext)},
                internal_to_external=graph_user_ext,
                self_loops_dropped=int(meta["self_loops_dropped"]),
                duplicate_edges_dropped=int(meta["duplicate_edges_dropped"]),
                edge_lines=int(meta["edge_lines"]),
            )
            all_user_ext = z["all_user_ext"]
            item_ext = z["item_ext"]
            table = RatingsTable(
                z["rating_user"], z["rating_item"], z["rating_value"],
                num_users=int(all_user_ext.size), num_items=int(item_ext.size),
                user_external_to_internal={int(e): i for i, e in enumerate(all_user_ext)},
                user_internal_to_external=all_user_ext,
                item_external_to_internal={int(e): i for i, e in enumerate(item_ext)},
                item_internal_to_external=item_ext,
                duplicate_ratings_dropped=int(meta["duplicate_ratings_dropped"]),
                rating_lines=int(meta["rating_lines"]),
            )
            return graph, table
    except (OSError, ValueError, KeyError):
        return None


def _load_dataset(cfg: RunConfig, *, use_cache: bool = False, cache_dir=None):
    """Parse both input files, optionally through a binary cache.

    The cache key is a digest of the raw file bytes, so edits to either
    file invalidate it.
    """
    cache_path = None
    digest = None
    if use_cache:
        digest = _file_digest(cfg.trust_path) + _file_digest(cfg.ratings_path)
        stem = hashlib.sha256(digest.encode()).hexdigest()[:16]
        cache_path = Path(cache_dir) / f"dataset_{stem}.npz"
        if cache_path.exists():
            cached = _load_dataset_cache(cache_path, digest)
            if cached is not None:
                return cached
    with open(cfg.trust_path, "r", encoding="utf-8") as fh:
        graph = load_trust_edges(fh)
    with open(cfg.ratings_path, "r", encoding="utf-8") as fh:
        table = load_ratings(fh, graph)
    if use_cache:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        _save_dataset_cache(cache_path, graph, table, digest)
    return graph, table


def _write_run_meta(cfg: RunConfig, command: str, threads: int, out_dir: Path,
                    extra: dict | None = None) -> None:
    meta = {"command": command, "config": asdict(cfg), "threads": threads,
            "version": __version__}
    if extra:
        meta.update(extra)
    with open(out_dir / "run_meta.json", "w", encoding="utf-8", newline="") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_approach(cfg: RunConfig, name: str | None) -> Approach:
    """The approach named on the command line, or the config's KS pipeline."""
    if name:
        return approach_from_name(name, alpha=cfg.alpha, k=cfg.k)
    return Approach(kind="ks", config=PipelineConfig(
        alpha=cfg.alpha, l_max=cfg.l_max, degree_norm=cfg.degree_norm,
        row_norm=cfg.row_norm, boost=cfg.boost, k=cfg.k))


def cmd_ingest(args) -> int:
    cfg = load_run_config(args)
    validate_run_config(cfg)
    out_dir = Path(cfg.output_dir)
    if args.cache:
        out_dir.mkdir(parents=True, exist_ok=True)
    graph, table = _load_dataset(cfg, use_cache=args.cache, cache_dir=out_dir / "cache")
    print(json.dumps(ingestion_summary(graph, table)))
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args)
    validate_run_config(cfg)
    threads = _resolve_threads(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "cache" if args.cache else None
    graph, table = _load_dataset(cfg, use_cache=args.cache, cache_dir=out_dir / "cache")
    split = cold_start_split(table, cfg.cold_start_threshold)
    approach = _config_approach(cfg, args.approach)
    report = evaluate_approach(approach, graph, split, k=cfg.k, n_max=cfg.n_max,
                               alpha=cfg.alpha, fallback=cfg.fallback,
                               threads=threads, cache_dir=cache_dir,
                               collect_user_detail=args.user_detail)
    csv_path = out_dir / f"metrics_{report.approach}.csv"
    write_metrics_csv([report], csv_path)
    if args.user_detail:
        write_user_detail_csv([report], out_dir / f"user_detail_{report.approach}.csv")
    _write_run_meta(cfg, "evaluate", threads, out_dir, {"approach": report.approach})
    n_show = min(10, cfg.n_max)
    print(f"{report.approach}: ndcg@{n_show}={_fmt(report.ndcg[n_show - 1])} "
          f"users={report.users_evaluated}")
    print(str(csv_path))
    return 0


def cmd_grid(args) -> int:
    cfg = load_run_config(args)
    validate_run_config(cfg)
    threads = _resolve_threads(args)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "cache" if args.cache else None
    graph, table = _load_dataset(cfg, use_cache=args.cache, cache_dir=out_dir / "cache")
    split = cold_start_split(table, cfg.cold_start_threshold)
    reports = run_grid(graph, split, alpha=cfg.alpha, k=cfg.k, n_max=cfg.n_max,
                       fallback=cfg.fallback, threads=threads, cache_dir=cache_dir,
                       collect_user_detail=args.user_detail)
    write_metrics_csv(reports, out_dir / "metrics.csv")
    write_pr_curve_csv(emit_pr_curve(reports, range(1, cfg.n_max + 1)),
                       out_dir / "pr_curve.csv")
    if args.user_detail:
        write_user_detail_csv(reports, out_dir / "user_detail.csv")
    _write_run_meta(cfg, "grid", threads, out_dir,
                    {"approaches": [r.approach for r in reports]})
    n_show = min(10, cfg.n_max)
    print(f"ndcg@{n_show} ranking ({len(reports)} approaches, "
          f"{reports[0].users_evaluated} users):")
    for rank, (name, value) in enumerate(rank_summary(reports, n=n_show), start=1):
        print(f"{rank:3d}. {name:12s} {_fmt(value)}")
    return 0


def cmd_curve(args) -> int:
    """Project recall/precision columns out of a metrics CSV.

    Values pass through as the exact strings found in the input (after a
    parse check), so deriving a curve from a grid's metrics file
    reproduces the grid's own curve file byte for byte.
    """
    by_approach: dict[str, dict[int, tuple[str, str]]] = {}
    with open(args.metrics, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"approach", "n", "recall", "precision"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise CLIError(f"metrics file {args.metrics} lacks columns: "
                           f"{', '.join(sorted(missing))}")
        for lineno, row in enumerate(reader, start=2):
            try:
                n = int(row["n"])
                float(row["recall"])
                float(row["precision"])
            except (TypeError, ValueError):
                raise CLIError(f"metrics file {args.metrics} line {lineno}: "
                               f"non-numeric n/recall/precision") from None
            by_approach.setdefault(row["approach"], {})[n] = (
                row["recall"], row["precision"])
    if not by_approach:
        raise CLIError(f"metrics file {args.metrics} has no data rows")
    n_max = max(max(per_n) for per_n in by_approach.values())
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PR_CURVE_HEADER)
        for name, per_n in by_approach.items():
            for n in range(1, n_max + 1):
                if n not in per_n:
                    raise CLIError(f"approach {name} is missing metrics for n={n}")
                recall, precision = per_n[n]
                writer.writerow([name, str(n), recall, precision])
    print(str(args.out))
    return 0


def cmd_recommend(args) -> int:
    cfg = load_run_config(args)
    validate_run_config(cfg)
    threads = _resolve_threads(args)
    graph, table = _load_dataset(cfg, use_cache=args.cache,
                                 cache_dir=Path(cfg.output_dir) / "cache")
    if args.user not in table.user_external_to_internal:
        raise CLIError(f"unknown user id {args.user}")
    user = table.user_external_to_internal[args.user]
    approach = _config_approach(cfg, args.approach)
    n = args.n if args.n is not None else cfg.n_max
    A = adjacency(graph)
    if user < graph.num_users:
        rows = np.asarray([user], dtype=np.int64)
    else:
        rows = np.asarray([], dtype=np.int64)
    if approach.kind == "ks":
        similarity = build_similarity(A, degree_table(graph), approach.config,
                                      rows=rows, threads=threads)
    elif approach.kind == "trust_exp":
        similarity = A
    elif approach.kind == "trust_jac":
        similarity = jaccard_similarity(A, rows=rows)
    else:
        similarity = None
    ranked = recommend(approach, user, similarity, table, n=n, k=cfg.k,
                       fallback=cfg.fallback)
    for item, score in ranked:
        print(f"{int(table.item_internal_to_external[item])}\t{_fmt(score)}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--trust", dest="trust_path", help="trust edge list file")
    parser.add_argument("--ratings", dest="ratings_path", help="ratings file")
    parser.add_argument("--output-dir", dest="output_dir", help="where outputs land")
    parser.add_argument("--alpha", type=float, help="walk decay factor")
    parser.add_argument("--l-max", dest="l_max", type=int, help="max walk length")
    parser.add_argument("--degree-norm", dest="degree_norm", choices=DEGREE_NORMS)
    parser.add_argument("--row-norm", dest="row_norm", choices=ROW_NORMS)
    parser.add_argument("--boost", dest="boost", action=argparse.BooleanOptionalAction,
                        default=None, help="pin direct trust edges at similarity 1")
    parser.add_argument("--k", type=int, help="neighbors per user")
    parser.add_argument("--n-max", dest="n_max", type=int,
                        help="evaluate top-n lists up to this length")
    parser.add_argument("--threshold", dest="cold_start_threshold", type=int,
                        help="users with fewer ratings than this are evaluation targets")
    parser.add_argument("--fallback", choices=FALLBACK_MODES,
                        help="what to do when a user gets no neighbor-based items")
    parser.add_argument("--seed", type=int, help="recorded in run metadata")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: TRUSTKATZ_THREADS, then cpu count)")
    parser.add_argument("--cache", action="store_true",
                        help="reuse/write binary caches under output-dir/cache")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trustkatz",
        description="Trust-network walk-similarity recommender toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse trust + ratings files, print a JSON summary")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("evaluate", help="evaluate one approach on a cold-start split")
    _add_common(p)
    p.add_argument("--approach", help="baseline name or KS descriptor "
                                      "(default: the configured pipeline)")
    p.add_argument("--user-detail", action="store_true",
                   help="also write per-user metric rows")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="evaluate baselines plus every valid pipeline cell")
    _add_common(p)
    p.add_argument("--user-detail", action="store_true",
                   help="also write per-user metric rows")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("curve", help="derive a precision-recall curve CSV "
                                     "from a metrics CSV")
    p.add_argument("--metrics", required=True, help="metrics CSV to read")
    p.add_argument("--out", required=True, help="curve CSV to write")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("recommend", help="print a ranked item list for one user")
    _add_common(p)
    p.add_argument("--user", type=int, required=True, help="external user id")
    p.add_argument("--approach", help="baseline name or KS descriptor "
                                      "(default: the configured pipeline)")
    p.add_argument("-n", dest="n", type=int, help="list length (default: n_max)")
    p.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, IndexError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
