"""Shared fixtures: the toy dataset, random digraph helpers, dataset gating."""

import os
from pathlib import Path

import numpy as np
import pytest

import trustkatz as tk

FIXTURES = Path(__file__).parent / "fixtures"
TOY_TRUST = FIXTURES / "toy_trust.txt"
TOY_RATINGS = FIXTURES / "toy_ratings.txt"

EPINIONS_HINT = (
    "real dataset not found: set TRUSTKATZ_EPINIONS_DIR to a directory holding "
    "trust_data.txt and ratings_data.txt, or place them under data/epinions/ "
    "(see README for where to download them)"
)


def epinions_dir():
    """Directory with trust_data.txt + ratings_data.txt, or None."""
    candidates = []
    env = os.environ.get("TRUSTKATZ_EPINIONS_DIR", "").strip()
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "epinions")
    for cand in candidates:
        if (cand / "trust_data.txt").is_file() and (cand / "ratings_data.txt").is_file():
            return cand
    return None


@pytest.fixture(scope="session")
def toy_graph():
    with open(TOY_TRUST, encoding="utf-8") as fh:
        return tk.load_trust_edges(fh)


@pytest.fixture(scope="session")
def toy_ratings(toy_graph):
    with open(TOY_RATINGS, encoding="utf-8") as fh:
        return tk.load_ratings(fh, toy_graph)


@pytest.fixture(scope="session")
def toy_split(toy_ratings):
    return tk.cold_start_split(toy_ratings, 5)


def random_digraph(rng, max_nodes=6):
    """A random simple digraph: (n, sorted deduplicated edge list)."""
    n = int(rng.integers(2, max_nodes + 1))
    density = rng.uniform(0.1, 0.8)
    edges = [(i, j) for i in range(n) for j in range(n)
             if i != j and rng.random() < density]
    return n, edges


def adjacency_from_edges(n, edges):
    """Binary CSR adjacency straight from an edge list."""
    from scipy import sparse
    if not edges:
        return sparse.csr_matrix((n, n), dtype=np.float64)
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    A = sparse.csr_matrix((np.ones(len(edges)), (src, dst)), shape=(n, n))
    A.sort_indices()
    return A


def dense_from_dict(sigma, n):
    """Dense array from the reference module's {(i, j): value} form."""
    out = np.zeros((n, n))
    for (i, j), v in sigma.items():
        out[i, j] = v
    return out


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance check at the end of the run."""
    entries = {}
    for status in ("failed", "error", "skipped", "passed"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            entries.setdefault(name, status.upper())
    if not entries:
        return
    terminalreporter.write_sep("-", "acceptance summary")
    for name in sorted(entries):
        label = name[len("test_"):].replace("_", " ") if name.startswith("test_") else name
        terminalreporter.write_line(f"{entries[name]:>7}  {label}")
