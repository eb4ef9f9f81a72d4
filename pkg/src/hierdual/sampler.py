"""Training and evaluation pair samplers: regular, heavy-tail and rebalanced mixtures."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, TextIO

import numpy as np

from .hierarchy import Hierarchy, HierarchyError


class SamplingKind(str, enum.Enum):
    REGULAR = "regular"
    HEAVY_TAIL_TOY = "heavy_tail_toy"
    HEAVY_TAIL_PROPORTIONAL = "heavy_tail_proportional"
    REBALANCED = "rebalanced"


@dataclass
class PairBatch:
    queries: np.ndarray
    documents: np.ndarray

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.int64)
        self.documents = np.asarray(self.documents, dtype=np.int64)
        if self.queries.shape != self.documents.shape or self.queries.ndim != 1:
            raise ValueError("queries and documents must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return len(self.queries)

    def validate(self, h: Hierarchy) -> np.ndarray:
        """Check every pair against ``h``; returns the pair distances."""
        return h.pair_distances(self.queries, self.documents)

    def write(self, stream: TextIO, strategy: str = "", seed=None, hierarchy_digest: str = "") -> None:
        stream.write(f"# strategy={strategy} seed={seed} hierarchy={hierarchy_digest} count={len(self)}\n")
        for q, x in zip(self.queries, self.documents):
            stream.write(f"{q}\t{x}\n")

    @classmethod
    def read(cls, stream: TextIO) -> "PairBatch":
        qs, xs = [], []
        for lineno, line in enumerate(stream, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'query<TAB>doc'")
            qs.append(int(parts[0]))
            xs.append(int(parts[1]))
        return cls(np.array(qs, dtype=np.int64), np.array(xs, dtype=np.int64))


class _DistanceIndex:
    """Relevant sets re-sorted by (distance, index), with per-node bucket offsets."""

    def __init__(self, h: Hierarchy):
        m = h.node_count
        rows = np.repeat(np.arange(m), h.relevant_sizes)
        order = np.lexsort((h.relevant_indices, h.relevant_distances, rows))
        self.indptr = h.relevant_indptr
        self.docs = h.relevant_indices[order]
        self.dist = h.relevant_distances[order]
        self.sizes = h.relevant_sizes
        self.maxdist = h.max_distance_per_node
        depth = int(self.maxdist.max()) + 1
        counts = np.zeros((m, depth), dtype=np.int64)
        np.add.at(counts, (rows, self.dist), 1)
        self.bucket_counts = counts
        self.bucket_starts = self.indptr[:-1, None] + np.cumsum(counts, axis=1) - counts
        self.weight_cum = np.cumsum(self.dist.astype(np.float64))
        self.row_weight_before = np.concatenate([[0.0], self.weight_cum])[self.indptr[:-1]]
        self.row_weight = np.add.reduceat(self.dist.astype(np.float64), self.indptr[:-1])
        self.deep_nodes = np.flatnonzero(self.maxdist >= 1)
        # nodes having a match at distance t, concatenated over t = 1..max
        present = counts[:, 1:] > 0
        self.by_dist_count = present.sum(axis=0)
        self.by_dist_start = np.cumsum(self.by_dist_count) - self.by_dist_count
        self.by_dist_nodes = np.nonzero(present.T)[1]


@lru_cache(maxsize=8)
def _index(h: Hierarchy) -> _DistanceIndex:
    return _DistanceIndex(h)


def _require_long_pairs(idx: _DistanceIndex) -> None:
    if len(idx.deep_nodes) == 0:
        raise HierarchyError("no long-distance pairs exist")


def sample_regular(h: Hierarchy, count: int, seed=None) -> PairBatch:
    """Uniform query, then a uniform document from its relevant set."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    q = rng.integers(h.node_count, size=count)
    offset = np.floor(rng.random(count) * h.relevant_sizes[q]).astype(np.int64)
    return PairBatch(q, h.relevant_indices[h.relevant_indptr[q] + offset])


def sample_heavy_tail_toy(h: Hierarchy, count: int, seed=None) -> PairBatch:
    """Distance ``t`` uniform over ``1..max distance``, then a query with a match at ``t``, then that match.

    Queries are uniform among nodes having a match at distance ``t``, and the
    document is uniform among those matches. No distance-0 pair is emitted,
    and on a perfect tree every nonzero distance gets the same share.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    idx = _index(h)
    _require_long_pairs(idx)
    rng = np.random.default_rng(seed)
    t = np.floor(rng.random(count) * len(idx.by_dist_count)).astype(np.int64)
    pick = np.floor(rng.random(count) * idx.by_dist_count[t]).astype(np.int64)
    q = idx.by_dist_nodes[idx.by_dist_start[t] + pick]
    bucket = t + 1
    size = idx.bucket_counts[q, bucket]
    offset = np.floor(rng.random(count) * size).astype(np.int64)
    return PairBatch(q, idx.docs[idx.bucket_starts[q, bucket] + offset])


def sample_heavy_tail_proportional(h: Hierarchy, count: int, seed=None) -> PairBatch:
    """Query uniform over nodes with a non-self match; document probability proportional to distance."""
    if count < 1:
        raise ValueError("count must be >= 1")
    idx = _index(h)
    _require_long_pairs(idx)
    rng = np.random.default_rng(seed)
    q = idx.deep_nodes[rng.integers(len(idx.deep_nodes), size=count)]
    target = idx.row_weight_before[q] + rng.random(count) * idx.row_weight[q]
    pos = np.searchsorted(idx.weight_cum, target, side="right")
    # Guard against landing past the row on floating-point edge cases.
    pos = np.minimum(pos, idx.indptr[q + 1] - 1)
    return PairBatch(q, idx.docs[pos])


_HEAVY = {
    SamplingKind.HEAVY_TAIL_TOY: sample_heavy_tail_toy,
    SamplingKind.HEAVY_TAIL_PROPORTIONAL: sample_heavy_tail_proportional,
}


def sample_rebalanced(
    h: Hierarchy,
    count: int,
    p: float,
    seed=None,
    heavy: SamplingKind = SamplingKind.HEAVY_TAIL_TOY,
) -> PairBatch:
    """``round(p * count)`` regular pairs plus heavy-tail pairs for the remainder, shuffled."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    n_reg = int(round(p * count))
    parts_q, parts_x = [], []
    if n_reg:
        b = sample_regular(h, n_reg, rng)
        parts_q.append(b.queries)
        parts_x.append(b.documents)
    if count - n_reg:
        b = _HEAVY[SamplingKind(heavy)](h, count - n_reg, rng)
        parts_q.append(b.queries)
        parts_x.append(b.documents)
    perm = rng.permutation(count)
    return PairBatch(np.concatenate(parts_q)[perm], np.concatenate(parts_x)[perm])


@dataclass(frozen=True)
class SamplingStrategy:
    """How training pairs are drawn. ``mix_p`` is the regular share for rebalanced mixtures."""

    kind: SamplingKind = SamplingKind.REGULAR
    mix_p: float = 1.0
    heavy: SamplingKind = SamplingKind.HEAVY_TAIL_TOY
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplingKind(self.kind))
        object.__setattr__(self, "heavy", SamplingKind(self.heavy))
        if not 0.0 <= self.mix_p <= 1.0:
            raise ValueError("mix_p must lie in [0, 1]")
        if self.heavy not in _HEAVY:
            raise ValueError("the inner heavy-tail strategy must be a heavy-tail kind")

    def sample(self, h: Hierarchy, count: int, rng=None) -> PairBatch:
        rng = self.seed if rng is None else rng
        if self.kind is SamplingKind.REGULAR:
            return sample_regular(h, count, rng)
        if self.kind is SamplingKind.REBALANCED:
            return sample_rebalanced(h, count, self.mix_p, rng, heavy=self.heavy)
        return _HEAVY[self.kind](h, count, rng)

    def describe(self) -> str:
        if self.kind is SamplingKind.REBALANCED:
            return f"rebalanced(p={self.mix_p},{self.heavy.value})"
        return self.kind.value


def distance_distribution(
    h: Hierarchy,
    kind: SamplingKind,
    p: float = 1.0,
    heavy: SamplingKind = SamplingKind.HEAVY_TAIL_TOY,
) -> np.ndarray:
    """Exact distribution of emitted pair distances, computed by enumeration over queries."""
    kind = SamplingKind(kind)
    m = h.node_count
    out = np.zeros(h.max_distance + 1)
    if kind is SamplingKind.REBALANCED:
        reg = distance_distribution(h, SamplingKind.REGULAR)
        tail = distance_distribution(h, heavy)
        return p * reg + (1 - p) * tail
    deep = [u for u in range(m) if h.max_distance_per_node[u] >= 1]
    if kind is SamplingKind.HEAVY_TAIL_TOY:
        if deep:
            out[1:] = 1.0 / h.max_distance
        return out
    for u in range(m):
        dists = h.relevant_distance_array(u)
        if kind is SamplingKind.REGULAR:
            np.add.at(out, dists, 1.0 / (len(dists) * m))
            continue
        if h.max_distance_per_node[u] < 1:
            continue
        w = dists.astype(np.float64)
        np.add.at(out, dists, w / (w.sum() * len(deep)))
    return out
