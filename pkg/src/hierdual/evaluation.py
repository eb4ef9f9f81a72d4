"""Exact brute-force retrieval and recall metrics sliced by hierarchy distance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np

from .construct import EmbeddingTable
from .hierarchy import Hierarchy, HierarchyError
from .sampler import PairBatch, sample_regular


@dataclass
class EvalReport:
    overall_recall: float
    per_distance_recall: dict = field(default_factory=dict)  # distance -> (recall, pair_count)
    min_slice_recall: float = float("nan")
    dimension: int = 0
    step: Optional[int] = None
    seed: Optional[int] = None
    phase: Optional[int] = None
    train_loss: Optional[float] = None

    def recall_at(self, distance: int) -> float:
        return self.per_distance_recall[distance][0]

    def as_dict(self) -> dict:
        return {
            "overall_recall": self.overall_recall,
            "min_slice_recall": self.min_slice_recall,
            "per_distance_recall": {
                str(d): {"recall": r, "pairs": n} for d, (r, n) in sorted(self.per_distance_recall.items())
            },
            "dimension": self.dimension,
            "step": self.step,
            "phase": self.phase,
            "seed": self.seed,
        }

    def to_json(self, stream: TextIO) -> None:
        json.dump(self.as_dict(), stream, indent=2, sort_keys=True)
        stream.write("\n")

    def to_csv(self, stream: TextIO) -> None:
        """One row per distance slice, then ``min`` and ``overall`` summary rows."""
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["slice", "recall", "pairs"])
        total = 0
        for d, (r, n) in sorted(self.per_distance_recall.items()):
            w.writerow([d, f"{r:.6f}", n])
            total += n
        w.writerow(["min", f"{self.min_slice_recall:.6f}", ""])
        w.writerow(["overall", f"{self.overall_recall:.6f}", total])


EVAL_SEED_TAG = 0xE7A1


def frozen_eval_pairs(h: Hierarchy, size: int, seed: int) -> PairBatch:
    """The regular-sampling evaluation set derived from a root seed."""
    return sample_regular(h, size, np.random.SeedSequence([seed, EVAL_SEED_TAG]))


def score_tables(params) -> tuple[np.ndarray, np.ndarray]:
    """``(queries, documents)`` row arrays used for scoring.

    Accepts trained parameters (normalized the same way as in training) or a
    ``(queries, documents)`` pair of embedding tables.
    """
    if hasattr(params, "query_embeddings"):
        return params.query_embeddings(), params.doc_embeddings()
    q, x = params
    q = q.vectors if isinstance(q, EmbeddingTable) else np.asarray(q, dtype=np.float64)
    x = x.vectors if isinstance(x, EmbeddingTable) else np.asarray(x, dtype=np.float64)
    if q.shape[1] != x.shape[1]:
        raise ValueError("query and document dimensions differ")
    return q, x


def top_k(query_vec: np.ndarray, docs, k: int) -> np.ndarray:
    """Indices of the ``k`` best inner products, best first; ties go to the lower index."""
    vectors = docs.vectors if isinstance(docs, EmbeddingTable) else np.asarray(docs)
    if not 1 <= k <= len(vectors):
        raise ValueError(f"k must lie in [1, {len(vectors)}]")
    scores = vectors @ np.asarray(query_vec, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def pair_ranks(q: np.ndarray, x: np.ndarray, queries, docs, chunk: int = 2048) -> np.ndarray:
    """0-based rank of each pair's document in its query's ordering (same tie rule as ``top_k``)."""
    queries = np.asarray(queries, dtype=np.int64)
    docs = np.asarray(docs, dtype=np.int64)
    ranks = np.empty(len(queries), dtype=np.int64)
    cols = np.arange(x.shape[0])
    for start in range(0, len(queries), chunk):
        sl = slice(start, start + chunk)
        scores = q[queries[sl]] @ x.T
        own = scores[np.arange(scores.shape[0]), docs[sl]][:, None]
        ahead = (scores > own) | ((scores == own) & (cols[None, :] < docs[sl, None]))
        ranks[sl] = ahead.sum(axis=1)
    return ranks


def _report(hits: np.ndarray, dists: np.ndarray, dimension: int, step=None, seed=None) -> EvalReport:
    per = {}
    for d in np.unique(dists):
        sel = dists == d
        per[int(d)] = (float(hits[sel].mean()), int(sel.sum()))
    return EvalReport(
        overall_recall=float(hits.mean()),
        per_distance_recall=per,
        min_slice_recall=min(r for r, _ in per.values()),
        dimension=dimension,
        step=step,
        seed=seed,
    )


def recall_at_relevant(params, h: Hierarchy, pairs: PairBatch, step=None, seed=None) -> EvalReport:
    """Recall with per-query cutoff ``k = |S(q)|``, overall and per distance slice."""
    if len(pairs) == 0:
        raise ValueError("evaluation set is empty")
    try:
        dists = h.pair_distances(pairs.queries, pairs.documents)
    except HierarchyError as exc:
        raise HierarchyError(f"malformed evaluation set: {exc}") from None
    q, x = score_tables(params)
    if q.shape[0] != h.node_count or x.shape[0] != h.node_count:
        raise ValueError("embedding tables must have one row per hierarchy node")
    ranks = pair_ranks(q, x, pairs.queries, pairs.documents)
    hits = ranks < h.relevant_sizes[pairs.queries]
    return _report(hits, dists, q.shape[1], step, seed)


def recall_at_k(params, pairs: PairBatch, k: int) -> float:
    """Fraction of pairs whose document ranks in the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pairs) == 0:
        raise ValueError("evaluation set is empty")
    q, x = score_tables(params)
    ranks = pair_ranks(q, x, pairs.queries, pairs.documents)
    return float(np.mean(ranks < k))


def dimension_sweep(
    h: Hierarchy,
    phases,
    dims: Sequence[int],
    threshold: float,
    eval_pairs: Optional[PairBatch] = None,
    eval_size: int = 10_000,
    seed: int = 0,
    normalize: bool = True,
) -> Optional[int]:
    """Smallest dimension in ``dims`` whose trained model beats ``threshold`` overall recall.

    Each dimension gets a fresh model trained with the ``phases`` template.
    Returns ``None`` when no dimension succeeds.
    """
    from .trainer import train

    if list(dims) != sorted(dims):
        raise ValueError("dims must be ascending")
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    if eval_pairs is None:
        eval_pairs = frozen_eval_pairs(h, eval_size, seed)
    for dim in dims:
        best, _ = train(h, dim, phases, eval_pairs, seed=seed, normalize=normalize)
        if best.validation_report.overall_recall > threshold:
            return dim
    return None


def all_pairs(h: Hierarchy) -> PairBatch:
    """Every (query, relevant document) pair of the hierarchy."""
    rows = np.repeat(np.arange(h.node_count), h.relevant_sizes)
    return PairBatch(rows, h.relevant_indices.copy())


def expected_recall(params, h: Hierarchy) -> EvalReport:
    """Recall at ``k = |S(q)|`` under regular sampling, computed exactly over all pairs.

    Pair ``(q, x)`` carries weight ``1 / (m |S(q)|)``. Slice pair counts are
    the number of enumerated pairs.
    """
    pairs = all_pairs(h)
    q, x = score_tables(params)
    ranks = pair_ranks(q, x, pairs.queries, pairs.documents)
    hits = ranks < h.relevant_sizes[pairs.queries]
    weights = 1.0 / (h.node_count * h.relevant_sizes[pairs.queries])
    per = {}
    for d in np.unique(h.relevant_distances):
        sel = h.relevant_distances == d
        per[int(d)] = (float(np.sum(weights[sel] * hits[sel]) / np.sum(weights[sel])), int(sel.sum()))
    return EvalReport(
        overall_recall=float(np.sum(weights * hits)),
        per_distance_recall=per,
        min_slice_recall=min(r for r, _ in per.values()),
        dimension=q.shape[1],
    )


def handcrafted_dimension(h: Hierarchy, threshold: float = 0.95, trials: int = 5, seed: int = 0) -> int:
    """Smallest dimension at which the Gaussian construction retrieves with recall above ``threshold``.

    Success at a dimension means a majority of ``trials`` seeded constructions
    exceed ``threshold`` exact recall under regular sampling. Doubling search,
    then bisection.
    """
    from .construct import construct_gaussian, trial_seed

    need = -(-trials // 2)

    def ok(dim: int) -> bool:
        wins = 0
        for t in range(trials):
            tables = construct_gaussian(h, dim, trial_seed(seed, dim, t))
            wins += expected_recall(tables, h).overall_recall > threshold
            if wins >= need:
                return True
            if wins + trials - t - 1 < need:
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
