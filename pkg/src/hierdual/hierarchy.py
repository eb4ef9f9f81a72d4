"""Hierarchy data model: a DAG over documents with precomputed relevant sets.

Nodes are dense integers ``0..m-1``. Edges point from a child to its parent
(from a specific item to a more general one). The relevant set of node ``u``
holds ``u`` and every node reachable from it, optionally capped by distance.
"""

from __future__ import annotations

import graphlib
import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np


class HierarchyError(ValueError):
    """Raised for malformed hierarchies or edge-list input."""


class CycleError(HierarchyError):
    """Raised when the edge relation contains a directed cycle."""

    def __init__(self, node, cycle=()):
        self.node = node
        self.cycle = tuple(cycle)
        super().__init__(f"cycle detected through node {node!r}")


@dataclass(frozen=True)
class TreeSpec:
    """Perfect tree with ``height`` levels (root included) and ``width`` children per inner node."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 2:
            raise HierarchyError("tree height must be >= 2 (the root is excluded from the universe)")
        if self.width < 1:
            raise HierarchyError("tree width must be >= 1")

    @property
    def node_count(self) -> int:
        return sum(self.width**level for level in range(1, self.height))


@dataclass(frozen=True, eq=False)
class Hierarchy:
    """Immutable DAG with relevant sets stored in CSR form.

    ``relevant_indptr``/``relevant_indices``/``relevant_distances`` hold, for
    each node ``u``, the sorted node indices of S(u) and the shortest
    directed-path length to each of them.
    """

    node_count: int
    edges: np.ndarray
    relevant_indptr: np.ndarray
    relevant_indices: np.ndarray
    relevant_distances: np.ndarray
    node_labels: Optional[tuple] = None
    max_distance_cap: Optional[int] = None
    _parents: tuple = field(default=(), repr=False)

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        edges: Iterable[tuple[int, int]],
        labels: Optional[Sequence[str]] = None,
        cap: Optional[int] = None,
    ) -> "Hierarchy":
        """Validate edges, check acyclicity and compute capped relevant sets by BFS."""
        if node_count < 1:
            raise HierarchyError("hierarchy must contain at least one node")
        if cap is not None and cap < 0:
            raise HierarchyError("max_distance_cap must be non-negative")
        if labels is not None and len(labels) != node_count:
            raise HierarchyError("node_labels length must equal node_count")

        edge_set = set()
        for child, parent in edges:
            child, parent = int(child), int(parent)
            if not (0 <= child < node_count and 0 <= parent < node_count):
                raise HierarchyError(f"edge ({child}, {parent}) out of range")
            if child == parent:
                raise CycleError(labels[child] if labels else child, (child,))
            edge_set.add((child, parent))
        edge_arr = np.array(sorted(edge_set), dtype=np.int64).reshape(-1, 2)

        parents = [[] for _ in range(node_count)]
        for child, parent in edge_arr:
            parents[child].append(int(parent))
        _check_acyclic(parents, labels)

        indptr = np.zeros(node_count + 1, dtype=np.int64)
        all_idx, all_dist = [], []
        for u in range(node_count):
            reach = _bfs(parents, u, cap)
            nodes = np.fromiter(reach.keys(), dtype=np.int64, count=len(reach))
            dists = np.fromiter(reach.values(), dtype=np.int64, count=len(reach))
            order = np.argsort(nodes)
            all_idx.append(nodes[order])
            all_dist.append(dists[order])
            indptr[u + 1] = indptr[u] + len(reach)

        return cls(
            node_count=node_count,
            edges=edge_arr,
            relevant_indptr=indptr,
            relevant_indices=np.concatenate(all_idx),
            relevant_distances=np.concatenate(all_dist),
            node_labels=tuple(labels) if labels is not None else None,
            max_distance_cap=cap,
            _parents=tuple(tuple(p) for p in parents),
        )

    def _check_node(self, u: int) -> int:
        u = int(u)
        if not 0 <= u < self.node_count:
            raise IndexError(f"node index {u} out of range [0, {self.node_count})")
        return u

    def relevant_set(self, u: int) -> np.ndarray:
        u = self._check_node(u)
        return self.relevant_indices[self.relevant_indptr[u] : self.relevant_indptr[u + 1]]

    def relevant_distance_array(self, u: int) -> np.ndarray:
        u = self._check_node(u)
        return self.relevant_distances[self.relevant_indptr[u] : self.relevant_indptr[u + 1]]

    def parents(self, u: int) -> tuple:
        return self._parents[self._check_node(u)]

    @cached_property
    def relevant_sizes(self) -> np.ndarray:
        return np.diff(self.relevant_indptr)

    @property
    def max_relevant_size(self) -> int:
        """The quantity ``s``: the largest relevant set."""
        return int(self.relevant_sizes.max())

    @cached_property
    def max_distance_per_node(self) -> np.ndarray:
        out = np.zeros(self.node_count, dtype=np.int64)
        rows = np.repeat(np.arange(self.node_count), self.relevant_sizes)
        np.maximum.at(out, rows, self.relevant_distances)
        return out

    @property
    def max_distance(self) -> int:
        return int(self.max_distance_per_node.max())

    @cached_property
    def label_index(self) -> dict:
        if self.node_labels is None:
            return {}
        return {label: i for i, label in enumerate(self.node_labels)}

    def index_of(self, label: str) -> int:
        try:
            return self.label_index[label]
        except KeyError:
            raise KeyError(f"unknown node label {label!r}") from None

    def label(self, u: int) -> str:
        u = self._check_node(u)
        return self.node_labels[u] if self.node_labels is not None else str(u)

    def is_relevant(self, u: int, v: int) -> bool:
        row = self.relevant_set(u)
        pos = np.searchsorted(row, v)
        return bool(pos < len(row) and row[pos] == v)

    @cached_property
    def _pair_keys(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.node_count, dtype=np.int64), self.relevant_sizes)
        return rows * self.node_count + self.relevant_indices

    def pair_distances(self, queries, docs) -> np.ndarray:
        """Stored distance for each pair; raises if a document is outside S(query)."""
        queries = np.asarray(queries, dtype=np.int64)
        docs = np.asarray(docs, dtype=np.int64)
        if queries.shape != docs.shape:
            raise HierarchyError("queries and documents must have equal length")
        if len(queries) and (
            min(queries.min(), docs.min()) < 0 or max(queries.max(), docs.max()) >= self.node_count
        ):
            raise IndexError("pair index out of range")
        keys = queries * self.node_count + docs
        pos = np.searchsorted(self._pair_keys, keys)
        pos_c = np.minimum(pos, len(self._pair_keys) - 1)
        bad = self._pair_keys[pos_c] != keys
        if bad.any():
            k = int(np.argmax(bad))
            raise HierarchyError(
                f"pair {k}: document {int(docs[k])} is not relevant to query {int(queries[k])}"
            )
        return self.relevant_distances[pos_c]

    def digest(self) -> str:
        """Short content hash, recorded alongside exported pair sets."""
        h = hashlib.sha256()
        h.update(np.int64(self.node_count).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        h.update(str(self.max_distance_cap).encode())
        return h.hexdigest()[:16]


def _bfs(parents, source: int, cap: Optional[int]) -> dict:
    dist = {source: 0}
    frontier = deque([source])
    while frontier:
        u = frontier.popleft()
        d = dist[u]
        if cap is not None and d >= cap:
            continue
        for p in parents[u]:
            if p not in dist:
                dist[p] = d + 1
                frontier.append(p)
    return dist


def _check_acyclic(parents, labels=None) -> None:
    sorter = graphlib.TopologicalSorter({u: ps for u, ps in enumerate(parents)})
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        cycle = exc.args[1]
        node = cycle[0]
        raise CycleError(labels[node] if labels else node, cycle) from None


def build_perfect_tree(spec: TreeSpec) -> Hierarchy:
    """Hierarchy over the non-root nodes of an ``(H, W)`` perfect tree.

    Nodes are numbered level by level; labels are ``"<depth>.<position>"``.
    Edges into the root are dropped, so depth-1 nodes are sources of nothing.
    """
    labels, edges = [], []
    prev_level = []
    for depth in range(1, spec.height):
        level = []
        for pos in range(spec.width**depth):
            idx = len(labels)
            labels.append(f"{depth}.{pos}")
            level.append(idx)
            if prev_level:
                edges.append((idx, prev_level[pos // spec.width]))
        prev_level = level
    return Hierarchy.from_edges(len(labels), edges, labels=labels)


def load_edge_list(stream: TextIO, cap: Optional[int] = None) -> Hierarchy:
    """Read ``child<TAB>parent`` lines; indices follow first appearance of each label."""
    index: dict[str, int] = {}
    edges = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise HierarchyError(f"line {lineno}: expected 'child<TAB>parent', got {line!r}")
        ids = []
        for label in parts:
            if label not in index:
                index[label] = len(index)
            ids.append(index[label])
        edges.append(tuple(ids))
    if not index:
        raise HierarchyError("edge list is empty: the universe has no nodes")
    return Hierarchy.from_edges(len(index), edges, labels=list(index), cap=cap)


def hierarchy_distance(h: Hierarchy, u: int, v: int) -> Optional[int]:
    """Shortest directed path length from ``u`` to ``v``, ignoring the cap; ``None`` if unreachable."""
    u, v = h._check_node(u), h._check_node(v)
    row = h.relevant_set(u)
    pos = np.searchsorted(row, v)
    if pos < len(row) and row[pos] == v:
        return int(h.relevant_distances[h.relevant_indptr[u] + pos])
    if h.max_distance_cap is None:
        return None
    return _bfs(h._parents, u, None).get(v)


def write_edge_list(h: Hierarchy, stream: TextIO) -> None:
    stream.write(f"# nodes={h.node_count} edges={len(h.edges)}\n")
    for child, parent in h.edges:
        stream.write(f"{h.label(child)}\t{h.label(parent)}\n")


def random_dag(node_count: int, edge_prob: float, seed=None) -> Hierarchy:
    """Random DAG: edges only go forward in a random permutation of the nodes.

    The number of edges is Binomial(m(m-1)/2, edge_prob); endpoints are drawn
    uniformly among forward pairs and duplicates merged.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(node_count)
    n_edges = rng.binomial(node_count * (node_count - 1) // 2, edge_prob) if node_count > 1 else 0
    a = rng.integers(node_count, size=n_edges)
    b = rng.integers(node_count - 1, size=n_edges) if node_count > 1 else a
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return Hierarchy.from_edges(node_count, zip(perm[lo], perm[hi]))


def random_tree(node_count: int, max_depth: Optional[int] = None, seed=None) -> Hierarchy:
    """Random rooted forest: each new node picks a uniformly random earlier node as parent.

    With ``max_depth`` set, parents are drawn only among nodes whose depth is
    below the limit, so every relevant set has at most ``max_depth`` members.
    """
    rng = np.random.default_rng(seed)
    depth = np.ones(node_count, dtype=np.int64)
    edges = []
    for u in range(1, node_count):
        eligible = np.flatnonzero(depth[:u] < max_depth) if max_depth is not None else None
        if eligible is not None and len(eligible) == 0:
            continue
        parent = int(rng.choice(eligible)) if eligible is not None else int(rng.integers(u))
        edges.append((u, parent))
        depth[u] = depth[parent] + 1
    return Hierarchy.from_edges(node_count, edges)


def induced_subhierarchy(h: Hierarchy, nodes: Iterable[int]) -> Hierarchy:
    """Hierarchy restricted to ``nodes``, keeping edges between kept nodes and the original cap."""
    keep = sorted({h._check_node(u) for u in nodes})
    remap = {u: i for i, u in enumerate(keep)}
    edges = [(remap[c], remap[p]) for c, p in h.edges if c in remap and p in remap]
    labels = [h.label(u) for u in keep]
    return Hierarchy.from_edges(len(keep), edges, labels=labels, cap=h.max_distance_cap)


def sample_subdag(h: Hierarchy, size: int, seed=None) -> Hierarchy:
    """Random ancestor-closed sub-DAG of roughly ``size`` nodes.

    Random seed nodes are added together with all their ancestors, so relevant
    sets and distances of kept nodes are unchanged. Stops once ``size`` nodes are
    reached; the final closure may overshoot slightly.
    """
    rng = np.random.default_rng(seed)
    if size >= h.node_count:
        return induced_subhierarchy(h, range(h.node_count))
    kept: set[int] = set()
    for u in rng.permutation(h.node_count):
        if len(kept) >= size:
            break
        if int(u) in kept:
            continue
        kept.update(_bfs(h._parents, int(u), None))
    return induced_subhierarchy(h, kept)
