"""Split, metrics, and grid runner against independent reference loops."""

import math

import numpy as np
import pytest

import trustkatz as tk
from trustkatz import Approach, PipelineConfig, RatingsTable

import reference as ref
from conftest import adjacency_from_edges, random_digraph
from test_recommender import make_table, table_as_dict


class TestColdStartSplit:
    def test_toy_targets_and_holdout(self, toy_ratings, toy_split):
        assert toy_split.target_users.tolist() == [3, 5, 6]
        assert {u: v.tolist() for u, v in toy_split.test.items()} == {
            3: [2, 4], 5: [2, 5], 6: [0, 1, 2]}
        # full holdout: targets keep no train ratings at all
        for u in (3, 5, 6):
            assert toy_split.train.user_items(u).size == 0
        assert toy_split.train.num_ratings == 27 - 7
        # non-targets keep everything
        assert toy_split.train.user_items(0).size == 5

    def test_train_popularity(self, toy_split):
        assert toy_split.train.item_counts.tolist() == [4, 3, 2, 3, 2, 2, 2, 1, 1]

    def test_zero_rating_users_are_not_targets(self):
        table = make_table([(0, 0, 5.0), (0, 1, 4.0), (2, 0, 3.0)], 3, 2)
        split = tk.cold_start_split(table, 5)
        # user 1 has no ratings; users 0 and 2 are below the threshold
        assert split.target_users.tolist() == [0, 2]

    def test_threshold_validation(self, toy_ratings):
        with pytest.raises(ValueError, match="threshold"):
            tk.cold_start_split(toy_ratings, 1)

    def test_no_targets_raises(self):
        table = make_table([(0, i, 3.0) for i in range(4)], 1, 4)
        with pytest.raises(ValueError, match="no cold-start users"):
            tk.cold_start_split(table, 3)

    def test_min_rating_limits_relevance(self):
        table = make_table([(0, 0, 2.0), (0, 1, 5.0), (1, 0, 1.0),
                            (2, 0, 4.0), (2, 1, 4.0), (2, 2, 4.0)], 3, 3)
        split = tk.cold_start_split(table, 3, min_rating=4.0)
        # user 1 only has a low rating, so it stays in train and is no target
        assert split.target_users.tolist() == [0]
        assert split.test[0].tolist() == [1]
        assert split.train.user_items(1).size == 1


class TestMetrics:
    def test_hand_case_two_hits(self):
        # hits at ranks 1 and 3 with two relevant items
        recommended = [(10, 1.0), (11, 0.9), (12, 0.8), (13, 0.7)]
        relevant = [10, 12]
        assert tk.precision_at_n(recommended, relevant, 10) == 2 / 10
        assert tk.recall_at_n(recommended, relevant, 10) == 1.0
        expected = (1.0 + 1.0 / math.log2(4)) / (1.0 + 1.0 / math.log2(3))
        assert tk.ndcg_at_n(recommended, relevant, 10) == pytest.approx(expected, rel=1e-12)

    def test_single_hit_at_rank_three(self):
        got = tk.ndcg_at_n([3, 4, 0], [0, 7], 3)
        assert got == pytest.approx(0.3065735963827292, rel=1e-12)

    def test_perfect_short_list_reaches_one(self):
        # ideal DCG uses min(n, |relevant|) slots
        assert tk.ndcg_at_n([5, 6], [5, 6], 10) == pytest.approx(1.0, rel=1e-15)
        assert tk.recall_at_n([5, 6], [5, 6], 10) == 1.0

    def test_short_recommendation_list_counts_misses(self):
        assert tk.precision_at_n([5], [5, 6, 7], 4) == 0.25

    def test_empty_recommendations_score_zero(self):
        assert tk.precision_at_n([], [1], 3) == 0.0
        assert tk.recall_at_n([], [1], 3) == 0.0
        assert tk.ndcg_at_n([], [1], 3) == 0.0

    def test_accepts_pairs_and_bare_ids(self):
        assert tk.precision_at_n([(4, 0.9), (5, 0.8)], [5], 2) == \
            tk.precision_at_n([4, 5], [5], 2) == 0.5

    def test_matches_reference_on_random_cases(self):
        rng = np.random.default_rng(73)
        for _ in range(200):
            pool = list(range(12))
            rng.shuffle(pool)
            recommended = pool[:int(rng.integers(0, 8))]
            relevant = set(int(x) for x in rng.choice(12, size=int(rng.integers(1, 5)),
                                                      replace=False))
            n = int(rng.integers(1, 8))
            assert tk.precision_at_n(recommended, relevant, n) == \
                ref.precision_at(recommended, relevant, n)
            assert tk.recall_at_n(recommended, relevant, n) == \
                ref.recall_at(recommended, relevant, n)
            assert tk.ndcg_at_n(recommended, relevant, n) == \
                pytest.approx(ref.ndcg_at(recommended, relevant, n), rel=1e-12, abs=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError, match="n must be"):
            tk.precision_at_n([1], [1], 0)
        with pytest.raises(ValueError, match="nonempty"):
            tk.recall_at_n([1], [], 2)
        with pytest.raises(ValueError, match="nonempty"):
            tk.ndcg_at_n([1], [], 2)


def random_dataset(rng):
    """Small random graph + ratings, some raters outside the graph."""
    n, edges = random_digraph(rng, max_nodes=6)
    while not edges:
        n, edges = random_digraph(rng, max_nodes=6)
    num_users = n + int(rng.integers(0, 3))  # a few rating-only users
    num_items = int(rng.integers(4, 9))
    triples = []
    seen = set()
    for _ in range(int(rng.integers(10, 40))):
        u = int(rng.integers(0, num_users))
        i = int(rng.integers(0, num_items))
        if (u, i) in seen:
            continue
        seen.add((u, i))
        triples.append((u, i, float(rng.integers(1, 6))))
    table = make_table(triples, num_users, num_items)
    return n, edges, table


def reference_report(n_graph, edges, table, split, approach, k, n_max):
    """Macro metrics computed entirely with the reference module."""
    train_dict = table_as_dict(split.train)
    popularity = {i: int(c) for i, c in enumerate(split.train.item_counts)}
    if approach.kind == "ks":
        cfg = approach.config
        sigma = ref.build_similarity(n_graph, edges, cfg.alpha, cfg.l_max,
                                     cfg.degree_norm, cfg.row_norm, cfg.boost)
    elif approach.kind == "trust_exp":
        sigma = {e: 1.0 for e in set(edges)}
    elif approach.kind == "trust_jac":
        sigma = ref.jaccard(n_graph, edges)
    else:
        sigma = None
    sums = {"ndcg": [0.0] * n_max, "recall": [0.0] * n_max, "precision": [0.0] * n_max}
    for u in split.target_users.tolist():
        if approach.kind == "mp":
            ranked = ref.most_popular(popularity, set(), n_max)
        else:
            neighbors = ref.top_k(sigma, u, k) if u < n_graph else []
            scores = ref.knn_scores(neighbors, train_dict)
            ranked = ref.rank_items(scores, popularity, set(), n_max)
        ids = [item for item, _ in ranked]
        relevant = set(split.test[u].tolist())
        for n in range(1, n_max + 1):
            sums["ndcg"][n - 1] += ref.ndcg_at(ids, relevant, n)
            sums["recall"][n - 1] += ref.recall_at(ids, relevant, n)
            sums["precision"][n - 1] += ref.precision_at(ids, relevant, n)
    count = split.target_users.size
    return {key: [v / count for v in vals] for key, vals in sums.items()}


class TestEvaluateApproach:
    def test_matches_reference_loop_end_to_end(self):
        rng = np.random.default_rng(79)
        checked = 0
        while checked < 12:
            n_graph, edges, table = random_dataset(rng)
            graph = FakeGraphAdapter(n_graph, edges)
            try:
                split = tk.cold_start_split(table, 3)
            except ValueError:
                continue
            approaches = [
                Approach(kind="mp"),
                Approach(kind="trust_exp"),
                Approach(kind="trust_jac"),
                Approach(kind="ks", config=PipelineConfig(alpha=0.5, l_max=2, k=3)),
                Approach(kind="ks", config=PipelineConfig(
                    alpha=0.7, l_max=2, degree_norm="none", row_norm="none",
                    boost=False, k=3)),
            ]
            for approach in approaches:
                got = tk.evaluate_approach(approach, graph, split, k=3, n_max=4)
                want = reference_report(n_graph, edges, table, split, approach,
                                        k=3, n_max=4)
                np.testing.assert_allclose(got.ndcg, want["ndcg"], rtol=1e-12, atol=1e-15)
                np.testing.assert_allclose(got.recall, want["recall"], rtol=1e-12, atol=1e-15)
                np.testing.assert_allclose(got.precision, want["precision"],
                                           rtol=1e-12, atol=1e-15)
                assert got.users_evaluated == split.target_users.size
            checked += 1

    def test_macro_average_includes_empty_list_users(self, toy_graph, toy_split):
        # user 6 has no trust edges and therefore an empty list; the
        # averages still divide by all three targets
        approach = Approach(kind="ks", config=PipelineConfig(k=3))
        report = tk.evaluate_approach(approach, toy_graph, toy_split, n_max=5)
        assert report.users_evaluated == 3
        assert report.recall[4] == pytest.approx(0.5, rel=1e-12)

    def test_user_detail_rows(self, toy_graph, toy_split):
        report = tk.evaluate_approach(Approach(kind="mp"), toy_graph, toy_split,
                                      n_max=3, collect_user_detail=True)
        assert len(report.user_detail) == 3 * 3
        # external ids 4, 6, 7 for internal targets 3, 5, 6
        assert sorted({row[0] for row in report.user_detail}) == [4, 6, 7]
        for _, n, ndcg, recall, precision in report.user_detail:
            assert 1 <= n <= 3
            assert 0.0 <= min(ndcg, recall, precision) and max(ndcg, recall, precision) <= 1.0

    def test_report_carries_config_fields(self, toy_graph, toy_split):
        ks = tk.evaluate_approach(Approach(kind="ks", config=PipelineConfig(k=3)),
                                  toy_graph, toy_split, n_max=2)
        assert (ks.l_max, ks.degree_norm, ks.row_norm, ks.boost) == (2, "combined", "max", True)
        mp = tk.evaluate_approach(Approach(kind="mp"), toy_graph, toy_split, n_max=2)
        assert (mp.l_max, mp.degree_norm, mp.row_norm, mp.boost) == (None, None, None, None)


class FakeGraphAdapter:
    """Minimal TrustGraph stand-in for synthetic edge lists."""

    def __init__(self, n, edges):
        unique = sorted(set(edges))
        self.num_users = n
        self.src = np.array([e[0] for e in unique], dtype=np.int64)
        self.dst = np.array([e[1] for e in unique], dtype=np.int64)
        self.external_to_internal = {i: i for i in range(n)}
        self.internal_to_external = np.arange(n, dtype=np.int64)
        self.self_loops_dropped = 0
        self.duplicate_edges_dropped = 0
        self.edge_lines = len(unique)

    @property
    def num_edges(self):
        return int(self.src.size)

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist()))


class TestGrid:
    def test_grid_has_48_unique_approaches(self):
        approaches = tk.grid_approaches()
        assert len(approaches) == 48
        names = [a.name for a in approaches]
        assert len(set(names)) == 48
        assert names[:3] == ["MP", "Trust_exp", "Trust_jac"]
        assert "KS_PCMB" in names and "KS_PNNN" in names

    def test_one_hop_boost_family_collapsed_to_canonical(self):
        approaches = tk.grid_approaches()
        one_hop_boosted = [a for a in approaches
                           if a.kind == "ks" and a.config.boost and a.config.l_max == 1]
        assert len(one_hop_boosted) == 1
        cfg = one_hop_boosted[0].config
        assert (cfg.degree_norm, cfg.row_norm) == ("none", "max")
        assert one_hop_boosted[0].name == "KS_NNMB"

    def test_no_invalid_cells(self):
        for approach in tk.grid_approaches():
            if approach.kind == "ks":
                assert not (approach.config.boost and approach.config.row_norm == "none")

    def test_run_grid_reports_align_with_single_evaluations(self, toy_graph, toy_split):
        reports = tk.run_grid(toy_graph, toy_split, alpha=0.5, k=3, n_max=3)
        assert len(reports) == 48
        by_name = {r.approach: r for r in reports}
        single = tk.evaluate_approach(Approach(kind="trust_exp"), toy_graph,
                                      toy_split, k=3, n_max=3)
        np.testing.assert_array_equal(by_name["Trust_exp"].ndcg, single.ndcg)
        flagship = tk.evaluate_approach(
            Approach(kind="ks", config=PipelineConfig(alpha=0.5, k=3)),
            toy_graph, toy_split, n_max=3)
        np.testing.assert_array_equal(by_name["KS_PCMB"].ndcg, flagship.ndcg)

    def test_disk_cache_round_trip(self, toy_graph, toy_split, tmp_path):
        kwargs = dict(alpha=0.5, k=3, n_max=3, cache_dir=tmp_path)
        first = tk.run_grid(toy_graph, toy_split, **kwargs)
        cached_files = sorted(p.name for p in tmp_path.glob("*.npz"))
        assert any(name.startswith("katz_l1") for name in cached_files)
        assert any(name.startswith("katz_l2") for name in cached_files)
        assert any(name.startswith("jaccard") for name in cached_files)
        second = tk.run_grid(toy_graph, toy_split, **kwargs)
        for a, b in zip(first, second):
            assert a.approach == b.approach
            np.testing.assert_array_equal(a.ndcg, b.ndcg)
            np.testing.assert_array_equal(a.recall, b.recall)
            np.testing.assert_array_equal(a.precision, b.precision)


class TestReportsAndCsv:
    def _reports(self, toy_graph, toy_split):
        return tk.run_grid(toy_graph, toy_split, alpha=0.5, k=3, n_max=3)

    def test_rank_summary_sorted(self, toy_graph, toy_split):
        reports = self._reports(toy_graph, toy_split)
        summary = tk.rank_summary(reports, n=3)
        values = [v for _, v in summary]
        assert values == sorted(values, reverse=True)
        names = [name for name, _ in summary]
        assert len(names) == len(set(names)) == 48

    def test_emit_pr_curve_rows_and_validation(self, toy_graph, toy_split):
        reports = self._reports(toy_graph, toy_split)[:2]
        rows = tk.emit_pr_curve(reports, range(1, 4))
        assert len(rows) == 6
        assert rows[0][0] == "MP" and rows[0][1] == 1
        with pytest.raises(ValueError, match="no metrics for n=9"):
            tk.emit_pr_curve(reports, [9])

    def test_metrics_csv_layout(self, toy_graph, toy_split, tmp_path):
        reports = self._reports(toy_graph, toy_split)
        path = tmp_path / "metrics.csv"
        tk.write_metrics_csv(reports, path)
        raw = path.read_bytes()
        assert b"\r" not in raw
        lines = raw.decode("utf-8").splitlines()
        assert lines[0] == "approach,l_max,degree_norm,row_norm,boost,n,ndcg,recall,precision,users_evaluated"
        assert len(lines) == 1 + 48 * 3
        assert lines[1].startswith("MP,,,,,1,")
        ks_lines = [ln for ln in lines if ln.startswith("KS_PCMB,")]
        assert len(ks_lines) == 3
        assert ks_lines[0].startswith("KS_PCMB,2,combined,max,yes,1,")
        for ln in lines[1:]:
            fields = ln.split(",")
            for value in fields[6:9]:
                float(value)  # every metric parses back

    def test_write_is_deterministic(self, toy_graph, toy_split, tmp_path):
        reports = self._reports(toy_graph, toy_split)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        tk.write_metrics_csv(reports, a)
        tk.write_metrics_csv(reports, b)
        assert a.read_bytes() == b.read_bytes()

    def test_pr_curve_csv(self, toy_graph, toy_split, tmp_path):
        reports = self._reports(toy_graph, toy_split)
        path = tmp_path / "curve.csv"
        tk.write_pr_curve_csv(tk.emit_pr_curve(reports, range(1, 4)), path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "approach,n,recall,precision"
        assert len(lines) == 1 + 48 * 3

    def test_user_detail_csv(self, toy_graph, toy_split, tmp_path):
        report = tk.evaluate_approach(Approach(kind="mp"), toy_graph, toy_split,
                                      n_max=3, collect_user_detail=True)
        path = tmp_path / "detail.csv"
        tk.write_user_detail_csv([report], path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "approach,user,n,ndcg,recall,precision"
        assert len(lines) == 1 + 9
        assert lines[1].split(",")[:3] == ["MP", "4", "1"]
