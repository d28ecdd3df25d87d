"""Katz-style similarity pipeline over the trust adjacency matrix.

The core quantity is the truncated sum

    sigma = sum over l in 0..l_max of (alpha * A)^l

computed by iterated sparse accumulation, with the diagonal removed so a
user is never their own neighbor. Each off-diagonal entry (i, j) therefore
adds alpha^l for every directed walk of length l <= l_max from i to j.
On top of that sit the normalization stages (a column-wise degree penalty,
a row-wise L1/L2/max scaling) and the weak-tie boost that pins every
direct trust edge at similarity 1 while keeping normalized indirect
similarities:

    sigma_boost = A + normalize(sigma with strong-tie entries zeroed)

All operations are pure: inputs are never mutated, outputs are canonical
CSR matrices (sorted indices, no stored zeros). Every stage is row-local
given the adjacency matrix and its degree vectors, so any row subset can
be computed independently (``rows=``); restricting first and composing
after yields exactly those rows of the full composition. The evaluator
relies on this to touch only cold-start users' rows.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .graph_core import DegreeVector

DEGREE_NORMS = ("none", "in", "out", "combined")
ROW_NORMS = ("none", "L1", "L2", "max")

DEFAULT_MAX_ENTRIES = 500_000_000
DEFAULT_BLOCK_SIZE = 8192


class BudgetExceededError(RuntimeError):
    """Similarity accumulation hit the stored-entry budget."""


@dataclass(frozen=True)
class PipelineConfig:
    """One similarity pipeline: walk weighting plus normalization choices."""

    alpha: float = 0.5
    l_max: int = 2
    degree_norm: str = "combined"
    row_norm: str = "max"
    boost: bool = True
    k: int = 40

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if int(self.l_max) != self.l_max or self.l_max < 0:
            raise ValueError("l_max must be an integer >= 0")
        if self.degree_norm not in DEGREE_NORMS:
            raise ValueError(f"degree_norm must be one of {DEGREE_NORMS}, not {self.degree_norm!r}")
        if self.row_norm not in ROW_NORMS:
            raise ValueError(f"row_norm must be one of {ROW_NORMS}, not {self.row_norm!r}")
        if self.boost and self.row_norm == "none":
            raise ValueError("boost requires a row normalization")
        if self.k < 1:
            raise ValueError("k must be >= 1")


_LMAX_CODE = {1: "N", 2: "P"}
_DEGREE_CODE = {"none": "N", "in": "I", "out": "O", "combined": "C"}
_ROW_CODE = {"none": "N", "L1": "L1", "L2": "L2", "max": "M"}


def descriptor(cfg: PipelineConfig) -> str:
    """Compact grid-cell name, e.g. KS_PCMB.

    Letters after ``KS_`` encode walk length (N = up to 1 hop, P = up to
    2), degree penalty (N/I/O/C), row norm (N/L1/L2/M) and boost (B/N).
    alpha and k are not encoded.
    """
    lc = _LMAX_CODE.get(cfg.l_max, str(cfg.l_max))
    return "KS_{}{}{}{}".format(
        lc, _DEGREE_CODE[cfg.degree_norm], _ROW_CODE[cfg.row_norm],
        "B" if cfg.boost else "N")


def parse_descriptor(name: str, *, alpha: float = 0.5, k: int = 40) -> PipelineConfig:
    """Inverse of ``descriptor``; alpha and k come from the keyword args."""
    text = name.strip().upper()
    if not text.startswith("KS_"):
        raise ValueError(f"not a KS descriptor: {name!r}")
    body = text[3:]
    try:
        lc, rest = body[0], body[1:]
        l_max = {"N": 1, "P": 2}.get(lc)
        if l_max is None:
            l_max = int(lc)
        degree = {code: mode for mode, code in _DEGREE_CODE.items()}[rest[0]]
        rest = rest[1:]
        if rest[:2] in ("L1", "L2"):
            row, rest = rest[:2], rest[2:]
        else:
            row = {"N": "none", "M": "max"}[rest[0]]
            rest = rest[1:]
        boost = {"B": True, "N": False}[rest]
    except (KeyError, IndexError, ValueError):
        raise ValueError(f"malformed KS descriptor: {name!r}") from None
    return PipelineConfig(alpha=alpha, l_max=l_max, degree_norm=degree,
                          row_norm=row, boost=boost, k=k)


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """A user-by-user similarity matrix plus the stages that produced it."""

    matrix: sparse.csr_matrix
    stages: tuple[str, ...]

    @property
    def num_users(self) -> int:
        return int(self.matrix.shape[0])


def _as_csr(M) -> sparse.csr_matrix:
    if isinstance(M, SimilarityMatrix):
        M = M.matrix
    if not sparse.issparse(M):
        M = sparse.csr_matrix(np.asarray(M, dtype=np.float64))
    M = M.tocsr()
    if M.dtype != np.float64:
        M = M.astype(np.float64)
    return M


def _as_square_csr(M) -> sparse.csr_matrix:
    M = _as_csr(M)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix must be square, got shape {M.shape}")
    return M


def _strip_diagonal(M: sparse.csr_matrix, global_rows: np.ndarray) -> None:
    """Zero entries (r, global_rows[r]) of the row-block matrix M, in place."""
    if M.nnz == 0:
        return
    owner = np.repeat(np.arange(M.shape[0]), np.diff(M.indptr))
    mask = M.indices == global_rows[owner]
    if mask.any():
        M.data[mask] = 0.0
        M.eliminate_zeros()


def _assemble_rows(n: int, blocks, parts) -> sparse.csr_matrix:
    """Scatter disjoint row-block results back into an n x n CSR."""
    if not parts:
        return sparse.csr_matrix((n, n), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for block, part in zip(blocks, parts):
        counts[block] = np.diff(part.indptr)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    data = np.concatenate([p.data for p in parts])
    indices = np.concatenate([p.indices for p in parts])
    out = sparse.csr_matrix((data, indices, indptr), shape=(n, n))
    out.sort_indices()
    return out


def _select_rows(n: int, rows) -> np.ndarray:
    if rows is None:
        return np.arange(n, dtype=np.int64)
    sel = np.unique(np.asarray(rows, dtype=np.int64))
    if sel.size and (sel[0] < 0 or sel[-1] >= n):
        raise ValueError(f"row indices out of range for {n} users")
    return sel


def _charge(committed, lock, amount, max_entries):
    with lock:
        if committed[0] + amount > max_entries:
            raise BudgetExceededError(
                f"similarity accumulation would exceed max_entries={max_entries} stored entries")


def _katz_block(A, block, alpha, l_max, max_entries, committed, lock):
    n = A.shape[1]
    if l_max == 0 or block.size == 0:
        return sparse.csr_matrix((block.size, n), dtype=np.float64)
    P = A[block] * alpha
    S = P.copy()
    for _ in range(l_max - 1):
        P = (P @ A) * alpha
        _charge(committed, lock, S.nnz + P.nnz, max_entries)
        S = S + P
    _strip_diagonal(S, block)
    S.sort_indices()
    _charge(committed, lock, S.nnz, max_entries)
    with lock:
        committed[0] += S.nnz
    return S


def katz_truncated(A, alpha: float, l_max: int, *, rows=None,
                   max_entries: int = DEFAULT_MAX_ENTRIES,
                   block_size: int = DEFAULT_BLOCK_SIZE,
                   threads: int = 1) -> sparse.csr_matrix:
    """Truncated walk-sum similarity with the diagonal zeroed.

    Sums (alpha * A)^l for l = 0..l_max, then drops the diagonal (which is
    where the identity l = 0 term lives, plus any longer closed walks).
    ``A`` must be square. With ``rows``, only those rows of the result are
    materialized and all other rows are empty, which is exact because each
    term is row-local.

    Accumulation runs over row blocks, optionally across ``threads``
    worker threads; results are assembled in row order, so the output is
    identical whatever the thread count. If the stored-entry count would
    exceed ``max_entries``, the computation aborts with
    BudgetExceededError rather than exhausting memory.
    """
    A = _as_square_csr(A)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if int(l_max) != l_max or l_max < 0:
        raise ValueError("l_max must be an integer >= 0")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    n = A.shape[0]
    sel = _select_rows(n, rows)
    blocks = [sel[i:i + block_size] for i in range(0, sel.size, block_size)]
    committed = [0]
    lock = threading.Lock()

    def work(block):
        return _katz_block(A, block, alpha, int(l_max), max_entries, committed, lock)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return _assemble_rows(n, blocks, parts)


def degree_normalize(S, degree) -> sparse.csr_matrix:
    """Scale column j of S by 1 / max(degree[j], 1).

    A popularity penalty: similarity toward highly connected users is
    damped, isolated columns are left untouched rather than divided by
    zero. ``degree`` may be a DegreeVector or a plain integer vector.
    """
    values = degree.values if isinstance(degree, DegreeVector) else np.asarray(degree)
    S = _as_csr(S)
    if values.shape[0] != S.shape[1]:
        raise ValueError("degree vector length does not match matrix columns")
    div = np.maximum(values.astype(np.float64), 1.0)
    out = S.copy()
    out.data = out.data / div[out.indices]
    return out


def row_normalize(S, norm: str) -> sparse.csr_matrix:
    """Divide each nonzero row by its L1 sum, L2 norm, or maximum entry.

    Rows with no entries are left empty. Entries are assumed non-negative,
    as everything in the pipeline produces.
    """
    if norm not in ("L1", "L2", "max"):
        raise ValueError(f"row norm must be 'L1', 'L2' or 'max', not {norm!r}")
    S = _as_csr(S)
    if norm == "L1":
        scale = np.asarray(abs(S).sum(axis=1)).ravel()
    elif norm == "L2":
        scale = np.sqrt(np.asarray(S.multiply(S).sum(axis=1)).ravel())
    else:
        scale = S.max(axis=1).toarray().ravel()
    scale = np.where(scale == 0.0, 1.0, scale)
    out = S.copy()
    out.data = out.data / np.repeat(scale, np.diff(S.indptr))
    return out


def zero_strong_ties(S, A) -> sparse.csr_matrix:
    """Zero every entry of S at a position where A has an edge."""
    S = _as_csr(S)
    A = _as_csr(A)
    if S.shape != A.shape:
        raise ValueError(f"shape mismatch: similarity {S.shape} vs adjacency {A.shape}")
    overlap = S.multiply(A != 0)
    out = (S - overlap).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def boost(S_weak, A) -> sparse.csr_matrix:
    """Direct-trust boost: adjacency plus normalized weak-tie similarity.

    Every trusted user ends at similarity exactly 1 (weak entries there
    must already be zero); indirect similarities keep their normalized
    value. ``S_weak`` must have zero at all strong-tie positions and on
    the diagonal -- nonzero values there mean the pipeline stages ran out
    of order, and raise ValueError.
    """
    S = _as_csr(S_weak)
    A = _as_csr(A)
    if S.shape != A.shape:
        raise ValueError(f"shape mismatch: similarity {S.shape} vs adjacency {A.shape}")
    if S.multiply(A != 0).nnz:
        raise ValueError("similarity is nonzero at strong-tie positions; "
                         "zero_strong_ties must run before boost")
    if S.shape[0] == S.shape[1] and np.any(S.diagonal() != 0.0):
        raise ValueError("similarity diagonal must be zero before boost")
    out = (A + S).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def restrict_rows(M, rows) -> sparse.csr_matrix:
    """Copy of M with every row outside ``rows`` emptied (same shape)."""
    M = _as_csr(M)
    n = M.shape[0]
    keep = np.zeros(n, dtype=bool)
    idx = np.asarray(rows, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"row indices out of range for {n} rows")
    keep[idx] = True
    per_row = np.diff(M.indptr)
    mask = np.repeat(keep, per_row)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.where(keep, per_row, 0), out=indptr[1:])
    return sparse.csr_matrix((M.data[mask], M.indices[mask], indptr), shape=M.shape)


def apply_stages(sigma, A, degrees, cfg: PipelineConfig, *, rows=None) -> SimilarityMatrix:
    """Run the normalization stages on a precomputed walk-sum matrix.

    Stage order is fixed: the degree penalty first, then with boost the
    strong-tie removal, row normalization and boost; without boost just
    the row normalization. ``degrees`` maps mode name to DegreeVector (may
    be None when cfg.degree_norm == "none"). ``rows`` must match the row
    restriction ``sigma`` was built with, so the boost adds only those
    adjacency rows.
    """
    sigma = _as_csr(sigma)
    stages = [f"katz(alpha={cfg.alpha:g}, l_max={cfg.l_max})"]
    if cfg.degree_norm != "none":
        if degrees is None:
            raise ValueError(f"degree vectors required for degree_norm={cfg.degree_norm!r}")
        sigma = degree_normalize(sigma, degrees[cfg.degree_norm])
        stages.append(f"degree_normalize({cfg.degree_norm})")
    if cfg.boost:
        A_csr = _as_csr(A)
        A_add = A_csr if rows is None else restrict_rows(A_csr, rows)
        sigma = zero_strong_ties(sigma, A_csr)
        sigma = row_normalize(sigma, cfg.row_norm)
        sigma = boost(sigma, A_add)
        stages += ["zero_strong_ties", f"row_normalize({cfg.row_norm})", "boost"]
    elif cfg.row_norm != "none":
        sigma = row_normalize(sigma, cfg.row_norm)
        stages.append(f"row_normalize({cfg.row_norm})")
    return SimilarityMatrix(matrix=sigma, stages=tuple(stages))


def build_similarity(A, degrees, cfg: PipelineConfig, *, rows=None,
                     max_entries: int = DEFAULT_MAX_ENTRIES,
                     block_size: int = DEFAULT_BLOCK_SIZE,
                     threads: int = 1) -> SimilarityMatrix:
    """Full pipeline: walk-sum accumulation followed by ``apply_stages``."""
    sigma = katz_truncated(A, cfg.alpha, cfg.l_max, rows=rows,
                           max_entries=max_entries, block_size=block_size,
                           threads=threads)
    return apply_stages(sigma, A, degrees, cfg, rows=rows)


def jaccard_similarity(A, *, rows=None) -> sparse.csr_matrix:
    """Jaccard overlap of out-neighbor sets, diagonal zeroed.

    sigma[i, j] = |out(i) & out(j)| / |out(i) | out(j)|. Pairs with no
    common out-neighbor produce no entry. With ``rows``, only those rows
    are materialized; prefer that on large graphs, the full matrix is
    dense-ish and expensive.
    """
    A = _as_square_csr(A)
    if A.nnz and not np.all(A.data == 1.0):
        raise ValueError("adjacency must be binary")
    n = A.shape[0]
    sel = _select_rows(n, rows)
    if sel.size == 0:
        return sparse.csr_matrix((n, n), dtype=np.float64)
    inter = (A[sel] @ A.T).tocsr()
    inter.sort_indices()
    outdeg = np.asarray(A.sum(axis=1)).ravel()
    owner = np.repeat(np.arange(sel.size), np.diff(inter.indptr))
    union = outdeg[sel[owner]] + outdeg[inter.indices] - inter.data
    inter.data = inter.data / union
    _strip_diagonal(inter, sel)
    return _assemble_rows(n, [sel], [inter])


def top_k_neighbors(S, user: int, k: int) -> list[tuple[int, float]]:
    """Up to k positive-similarity neighbors of ``user``, best first.

    Ties break on the lower user index. The user itself is never returned.
    """
    M = _as_csr(S)
    n = M.shape[0]
    if not 0 <= user < n:
        raise IndexError(f"user index {user} out of range for {n} users")
    if k < 1:
        raise ValueError("k must be >= 1")
    lo, hi = M.indptr[user], M.indptr[user + 1]
    cols = M.indices[lo:hi]
    vals = M.data[lo:hi]
    keep = (vals > 0) & (cols != user)
    cols, vals = cols[keep], vals[keep]
    order = np.lexsort((cols, -vals))[:k]
    return [(int(cols[i]), float(vals[i])) for i in order]


def save_similarity(path, sim: SimilarityMatrix, *, extra_meta: dict | None = None) -> None:
    """Persist a similarity matrix to an .npz with a JSON metadata header."""
    meta = {
        "stages": list(sim.stages),
        "shape": [int(sim.matrix.shape[0]), int(sim.matrix.shape[1])],
        "nnz": int(sim.matrix.nnz),
    }
    if extra_meta:
        meta.update(extra_meta)
    m = sim.matrix.tocsr()
    np.savez(path,
             header=np.array(json.dumps(meta, sort_keys=True)),
             data=m.data, indices=m.indices, indptr=m.indptr,
             shape=np.asarray(m.shape, dtype=np.int64))


def load_similarity(path) -> tuple[SimilarityMatrix, dict]:
    """Inverse of ``save_similarity``: (matrix with stages, full metadata)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["header"].item()))
        m = sparse.csr_matrix((z["data"], z["indices"], z["indptr"]),
                              shape=tuple(int(x) for x in z["shape"]))
    m.sort_indices()
    return SimilarityMatrix(matrix=m, stages=tuple(meta.get("stages", ()))), meta
