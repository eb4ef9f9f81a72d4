"""Handcrafted dual-encoder embeddings for a known hierarchy and margin certification."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, TextIO

import numpy as np

from .hierarchy import Hierarchy

TABLE_MAGIC = b"HREMBTB1"
_HEADER = struct.Struct("<8sQQB7x")


@dataclass
class EmbeddingTable:
    """``count`` embeddings of dimension ``dim``.

    Stored row-per-item as ``vectors`` with shape ``(count, dim)``; ``matrix``
    is the ``dim x count`` view with one item per column.
    """

    vectors: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1 or self.vectors.shape[1] < 1:
            raise ValueError("embedding table must be a non-empty 2-D array")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("table flagged normalized but a column norm differs from 1")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.vectors.T

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.vectors.copy(), self.normalized)

    def write(self, stream: BinaryIO) -> None:
        """Header (magic, dim, count, flag) then the ``dim x count`` matrix as row-major float64 LE."""
        stream.write(_HEADER.pack(TABLE_MAGIC, self.dim, self.count, int(self.normalized)))
        stream.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @classmethod
    def read(cls, stream: BinaryIO) -> "EmbeddingTable":
        header = stream.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError("truncated embedding table header")
        magic, dim, count, flag = _HEADER.unpack(header)
        if magic != TABLE_MAGIC:
            raise ValueError(f"bad embedding table magic {magic!r}")
        nbytes = 8 * dim * count
        payload = stream.read(nbytes)
        if len(payload) != nbytes:
            raise ValueError("truncated embedding table payload")
        matrix = np.frombuffer(payload, dtype="<f8").reshape(dim, count)
        return cls(matrix.T.astype(np.float64), bool(flag))

    def write_text(self, stream: TextIO) -> None:
        for row in self.vectors:
            stream.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def read_text(cls, stream: TextIO, normalized: bool = False) -> "EmbeddingTable":
        rows = [[float(v) for v in line.split()] for line in stream if line.strip()]
        return cls(np.array(rows), normalized)


@dataclass
class SeparationReport:
    min_match_score: float
    max_nonmatch_score: float
    threshold_r: float
    margin: float
    feasible: bool
    epsilon: float
    per_query_threshold: np.ndarray = field(repr=False, default=None)
    per_query_margin: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "min_match_score": self.min_match_score,
            "max_nonmatch_score": self.max_nonmatch_score,
            "threshold_r": self.threshold_r,
            "margin": self.margin,
            "epsilon": self.epsilon,
            "feasible": self.feasible,
            "min_per_query_margin": float(np.min(self.per_query_margin)),
        }


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def embed_from_draws(h: Hierarchy, draws: np.ndarray) -> tuple[EmbeddingTable, EmbeddingTable]:
    """Documents are the normalized draws; each query is the normalized sum of its relevant draws."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.shape[0] != h.node_count:
        raise ValueError("need one draw per node")
    doc_norms = np.linalg.norm(draws, axis=1)
    summed = np.add.reduceat(draws[h.relevant_indices], h.relevant_indptr[:-1], axis=0)
    query_norms = np.linalg.norm(summed, axis=1)
    if np.any(doc_norms == 0) or np.any(query_norms == 0):
        raise FloatingPointError("degenerate zero-norm embedding")
    docs = EmbeddingTable(draws / doc_norms[:, None], normalized=True)
    queries = EmbeddingTable(summed / query_norms[:, None], normalized=True)
    return queries, docs


def gaussian_draws(node_count: int, dim: int, seed) -> np.ndarray:
    """Standard normal ``(node_count, dim)`` draws from PCG64; zero rows are redrawn once."""
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = rng.standard_normal((node_count, dim))
    zero = np.linalg.norm(draws, axis=1) == 0
    if zero.any():
        draws[zero] = rng.standard_normal((int(zero.sum()), dim))
        if np.any(np.linalg.norm(draws, axis=1) == 0):
            raise FloatingPointError("zero-norm Gaussian draw after redraw")
    return draws


def construct_gaussian(h: Hierarchy, dim: int, seed) -> tuple[EmbeddingTable, EmbeddingTable]:
    """Random Gaussian construction. Returns ``(queries, documents)``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return embed_from_draws(h, gaussian_draws(h.node_count, dim, seed))


def construct_onehot(h: Hierarchy) -> tuple[EmbeddingTable, EmbeddingTable]:
    """Documents are basis vectors; query ``i`` is the (unnormalized) indicator of S(i)."""
    m = h.node_count
    docs = np.eye(m)
    queries = np.zeros((m, m))
    rows = np.repeat(np.arange(m), h.relevant_sizes)
    queries[rows, h.relevant_indices] = 1.0
    return EmbeddingTable(queries, normalized=False), EmbeddingTable(docs, normalized=True)


def relevance_mask(h: Hierarchy, rows: np.ndarray) -> np.ndarray:
    """Boolean ``(len(rows), m)`` mask of relevant documents for the given query rows."""
    rows = np.asarray(rows, dtype=np.int64)
    mask = np.zeros((len(rows), h.node_count), dtype=bool)
    sizes = h.relevant_sizes[rows]
    starts = h.relevant_indptr[rows]
    local = np.repeat(np.arange(len(rows)), sizes)
    offsets = np.arange(sizes.sum()) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    mask[local, h.relevant_indices[np.repeat(starts, sizes) + offsets]] = True
    return mask


def check_separation(
    q: EmbeddingTable,
    x: EmbeddingTable,
    h: Hierarchy,
    epsilon: float,
    block_size: int = 1024,
) -> SeparationReport:
    """Brute-force scan of all query/document scores.

    Query blocks are scanned in order and reduced with min/max, so the result
    does not depend on ``block_size``.
    """
    if q.count != h.node_count or x.count != h.node_count:
        raise ValueError("tables must have one column per hierarchy node")
    if q.dim != x.dim:
        raise ValueError(f"dimension mismatch: queries {q.dim}, documents {x.dim}")
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 1/2)")

    m = h.node_count
    per_min = np.empty(m)
    per_max = np.empty(m)
    for start in range(0, m, block_size):
        rows = np.arange(start, min(start + block_size, m))
        scores = q.vectors[rows] @ x.vectors.T
        mask = relevance_mask(h, rows)
        per_min[rows] = np.where(mask, scores, np.inf).min(axis=1)
        per_max[rows] = np.where(mask, -np.inf, scores).max(axis=1)

    lo = float(per_min.min())
    hi = float(per_max.max())
    margin = (lo - hi) / 2
    return SeparationReport(
        min_match_score=lo,
        max_nonmatch_score=hi,
        threshold_r=(lo + hi) / 2,
        margin=margin,
        feasible=bool(margin > epsilon),
        epsilon=epsilon,
        per_query_threshold=(per_min + per_max) / 2,
        per_query_margin=(per_min - per_max) / 2,
    )


def trial_seed(seed: int, dim: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(dim), int(trial)])


def feasible_fraction(h: Hierarchy, dim: int, epsilon: float, trials: int, seed: int) -> float:
    hits = 0
    for t in range(trials):
        qt, xt = construct_gaussian(h, dim, trial_seed(seed, dim, t))
        hits += check_separation(qt, xt, h, epsilon).feasible
    return hits / trials


def min_feasible_dimension(h: Hierarchy, epsilon: float, trials: int = 5, seed: int = 0) -> int:
    """Smallest ``dim`` at which a majority of seeded Gaussian constructions separate.

    Doubling search from 1 up to ``4 m``, then bisection between the last
    failing and first passing dimension.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    need = math.ceil(trials / 2)

    def ok(dim: int) -> bool:
        hits = 0
        for t in range(trials):
            qt, xt = construct_gaussian(h, dim, trial_seed(seed, dim, t))
            hits += check_separation(qt, xt, h, epsilon).feasible
            if hits >= need:
                return True
            if hits + (trials - t - 1) < need:
                return False
        return False

    limit = 4 * h.node_count
    lo, hi = 0, 1
    while not ok(hi):
        if hi >= limit:
            raise RuntimeError("search exhausted")
        lo, hi = hi, min(2 * hi, limit)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def sufficient_dimension(h: Hierarchy, factor: int = 32) -> int:
    """``factor * s * ceil(log2 m)``, a dimension at which the Gaussian construction separates with high probability."""
    m = h.node_count
    return factor * h.max_relevant_size * max(1, math.ceil(math.log2(m)))
