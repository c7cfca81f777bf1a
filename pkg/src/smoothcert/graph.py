"""Graph and rating-matrix data model, dataset ingestion, and synthetic fixtures.

All container types are immutable after construction (their numpy buffers are
marked read-only) and safe to share across threads.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class ParseError(ValueError):
    """A dataset file violates the documented format."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Graph:
    """Undirected simple graph with dense node features and optional labels.

    Parameters
    ----------
    n : int
        Number of nodes. Node ids are 0..n-1.
    edges : array-like of shape (m, 2)
        Undirected edges, one row per edge in either orientation. Self-loops
        and duplicate edges (in any orientation) are rejected.
    features : array-like of shape (n, d)
        Dense real-valued node features.
    labels : array-like of shape (n,), optional
        Per-node class ids; -1 marks an unlabeled node.
    num_classes : int, optional
        Number of classes. Defaults to ``labels.max() + 1``.
    """

    def __init__(self, n, edges, features, labels=None, num_classes=None):
        n = int(n)
        if n < 0:
            raise ValueError("node count must be non-negative")
        self.n = n

        edges = np.asarray(edges, dtype=np.int64)
        if edges.size == 0:
            edges = np.empty((0, 2), dtype=np.int64)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise ValueError("edges must have shape (m, 2)")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            lo = np.minimum(edges[:, 0], edges[:, 1])
            hi = np.maximum(edges[:, 0], edges[:, 1])
            order = np.lexsort((hi, lo))
            canon = np.stack([lo[order], hi[order]], axis=1)
            dup = np.all(canon[1:] == canon[:-1], axis=1)
            if dup.any():
                u, v = canon[1:][dup][0]
                raise ValueError(f"duplicate edge ({u}, {v})")
            edges = canon
        self.edges = _frozen(np.ascontiguousarray(edges))

        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError("features must have shape (n, d)")
        self.features = _frozen(features)

        if labels is None:
            labels = np.full(n, -1, dtype=np.int64)
        else:
            labels = np.ascontiguousarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ValueError("labels must have shape (n,)")
            if labels.size and labels.min() < -1:
                raise ValueError("labels must be >= -1")
        self.labels = _frozen(labels)

        derived = int(labels.max()) + 1 if labels.size else 0
        self.num_classes = derived if num_classes is None else int(num_classes)
        if self.num_classes < derived:
            raise ValueError("num_classes smaller than the largest label + 1")

        # CSR over both edge orientations for neighbor queries.
        m = self.edges.shape[0]
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((dst, src))
        self.indptr = _frozen(np.concatenate(
            [[0], np.cumsum(np.bincount(src, minlength=n))]).astype(np.int64))
        self.indices = _frozen(dst[order])
        assert self.indices.shape[0] == 2 * m

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def degree(self, v: int) -> int:
        """Number of incident undirected edges of node ``v``."""
        if not 0 <= v < self.n:
            raise ValueError(f"node id {v} out of range [0, {self.n})")
        return int(self.indptr[v + 1] - self.indptr[v])

    def neighbors(self, v: int) -> np.ndarray:
        if not 0 <= v < self.n:
            raise ValueError(f"node id {v} out of range [0, {self.n})")
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels >= 0

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.neighbors(u)

    def fingerprint(self) -> str:
        """Stable hex digest of the graph contents."""
        h = hashlib.sha256()
        h.update(str(self.n).encode())
        h.update(self.edges.tobytes())
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n == other.n
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and self.num_classes == other.num_classes)

    def __repr__(self) -> str:
        return (f"Graph(n={self.n}, edges={self.num_edges}, "
                f"d={self.num_features}, classes={self.num_classes})")


@dataclass(frozen=True, eq=False)
class DataSplit:
    """Disjoint train/validation/test node-id sets."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            arr = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            if arr.size and arr.min() < 0:
                raise ValueError(f"{name} split contains negative node ids")
            object.__setattr__(self, name, _frozen(arr))
        total = len(self.train) + len(self.validation) + len(self.test)
        merged = np.concatenate([self.train, self.validation, self.test])
        if len(np.unique(merged)) != total:
            raise ValueError("split sets must be pairwise disjoint")


@dataclass(frozen=True)
class PerturbationBudget:
    """Attack budget: up to ``rho`` injected nodes, each with at most ``tau`` edges."""

    rho: int
    tau: int

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Implicit-feedback user-item interactions (bipartite, binary)."""

    users: int
    items: int
    pairs: np.ndarray  # (nnz, 2) rows of (user, item), sorted, deduplicated
    user_ids: Optional[np.ndarray] = field(default=None)
    item_ids: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64)
        if pairs.size == 0:
            pairs = np.empty((0, 2), dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("pairs must have shape (nnz, 2)")
        if pairs.size:
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.users:
                raise ValueError("user index out of range")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.items:
                raise ValueError("item index out of range")
            order = np.lexsort((pairs[:, 1], pairs[:, 0]))
            pairs = pairs[order]
            if np.any(np.all(pairs[1:] == pairs[:-1], axis=1)):
                raise ValueError("duplicate (user, item) pair")
        object.__setattr__(self, "pairs", _frozen(np.ascontiguousarray(pairs)))
        indptr = np.concatenate(
            [[0], np.cumsum(np.bincount(pairs[:, 0], minlength=self.users))])
        object.__setattr__(self, "_indptr", _frozen(indptr.astype(np.int64)))

    @property
    def nnz(self) -> int:
        return self.pairs.shape[0]

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self._indptr)

    def items_of(self, user: int) -> np.ndarray:
        if not 0 <= user < self.users:
            raise ValueError(f"user index {user} out of range")
        return self.pairs[self._indptr[user]:self._indptr[user + 1], 1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (self.users == other.users and self.items == other.items
                and np.array_equal(self.pairs, other.pairs))


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream,)))


def load_node_classification_dataset(edge_path, node_path) -> Graph:
    """Load a graph from an edge list and a node attribute table.

    The edge file holds one ``u<TAB>v`` pair per line (0-indexed). The node
    file is a CSV with header ``node_id,label,f_1,...,f_d``; an empty label
    cell marks an unlabeled node. The node count is ``max node_id + 1``; edge
    endpoints must stay below it. Self-loops and repeated edges are rejected
    with the offending line number.
    """
    node_path = Path(node_path)
    with open(node_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(node_path, 1, "missing header") from None
        if len(header) < 2 or header[0] != "node_id" or header[1] != "label":
            raise ParseError(node_path, 1, "header must start with node_id,label")
        dim = len(header) - 2
        rows = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise ParseError(node_path, line_no,
                                 f"expected {dim + 2} columns, found {len(row)}")
            try:
                node_id = int(row[0])
            except ValueError:
                raise ParseError(node_path, line_no, f"bad node id {row[0]!r}") from None
            if node_id < 0:
                raise ParseError(node_path, line_no, "negative node id")
            if node_id in rows:
                raise ParseError(node_path, line_no, f"duplicate node id {node_id}")
            label_cell = row[1].strip()
            try:
                label = -1 if label_cell == "" else int(label_cell)
                feats = [float(x) for x in row[2:]]
            except ValueError:
                raise ParseError(node_path, line_no, "malformed label or feature") from None
            if label < -1:
                raise ParseError(node_path, line_no, f"negative label {label}")
            rows[node_id] = (label, feats)

    n = (max(rows) + 1) if rows else 0
    features = np.zeros((n, dim), dtype=np.float64)
    labels = np.full(n, -1, dtype=np.int64)
    for node_id, (label, feats) in rows.items():
        labels[node_id] = label
        features[node_id] = feats

    edge_path = Path(edge_path)
    edges = []
    seen = {}
    with open(edge_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(edge_path, line_no, f"expected 'u<TAB>v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(edge_path, line_no, f"non-integer endpoint in {line!r}") from None
            if u == v:
                raise ParseError(edge_path, line_no, f"self-loop at node {u}")
            if not (0 <= u < n and 0 <= v < n):
                raise ParseError(edge_path, line_no,
                                 f"endpoint out of range [0, {n}) in {line!r}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ParseError(edge_path, line_no,
                                 f"duplicate edge {key} (first at line {seen[key]})")
            seen[key] = line_no
            edges.append(key)

    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels)


def save_node_classification_dataset(graph: Graph, edge_path, node_path) -> None:
    """Write a graph back to the edge-list / node-table formats losslessly."""
    with open(edge_path, "w", encoding="utf-8") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(node_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        d = graph.num_features
        writer.writerow(["node_id", "label"] + [f"f_{j + 1}" for j in range(d)])
        for v in range(graph.n):
            label = "" if graph.labels[v] < 0 else str(int(graph.labels[v]))
            row = [str(v), label] + ["%.17g" % x for x in graph.features[v]]
            writer.writerow(row)


def load_interaction_dataset(path, split_fraction: float):
    """Load a tab-separated rating log and split it per user by time.

    Each line is ``user<TAB>item<TAB>rating<TAB>timestamp``. Ratings are
    binarized to implicit feedback. Per user, the earliest ``split_fraction``
    of records (ordered by timestamp, ties by item id) become training
    interactions; the rest are held out. Users with fewer than two records go
    wholly to training. User and item ids are remapped to dense 0-based
    indices; the original ids are kept on the returned matrix.

    Returns
    -------
    (InteractionMatrix, list[np.ndarray])
        Training interactions and, per dense user index, the held-out item
        indices.
    """
    if not 0 < split_fraction <= 1:
        raise ValueError("split_fraction must be in (0, 1]")
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(path, line_no, "expected 4 tab-separated fields")
            try:
                user, item = int(parts[0]), int(parts[1])
                float(parts[2])
                ts = int(parts[3])
            except ValueError:
                raise ParseError(path, line_no, f"malformed record {line!r}") from None
            records.append((user, item, ts, line_no))

    user_ids = np.unique([r[0] for r in records]) if records else np.empty(0, np.int64)
    item_ids = np.unique([r[1] for r in records]) if records else np.empty(0, np.int64)
    user_index = {int(u): i for i, u in enumerate(user_ids)}
    item_index = {int(it): i for i, it in enumerate(item_ids)}

    per_user: list[list[tuple[int, int, int]]] = [[] for _ in range(len(user_ids))]
    seen_pairs = {}
    for user, item, ts, line_no in records:
        u, i = user_index[user], item_index[item]
        if (u, i) in seen_pairs:
            raise ParseError(path, line_no,
                             f"duplicate interaction user={user} item={item} "
                             f"(first at line {seen_pairs[(u, i)]})")
        seen_pairs[(u, i)] = line_no
        per_user[u].append((ts, i, line_no))

    train_pairs = []
    held_out: list[np.ndarray] = []
    for u, recs in enumerate(per_user):
        recs.sort(key=lambda r: (r[0], r[1]))
        count = len(recs)
        if count < 2:
            n_train = count
        else:
            n_train = max(1, math.floor(split_fraction * count))
        train_pairs.extend((u, i) for _, i, _ in recs[:n_train])
        held_out.append(np.array(sorted(i for _, i, _ in recs[n_train:]), dtype=np.int64))

    matrix = InteractionMatrix(
        users=len(user_ids), items=len(item_ids),
        pairs=np.array(train_pairs, dtype=np.int64).reshape(-1, 2),
        user_ids=_frozen(user_ids.astype(np.int64)),
        item_ids=_frozen(item_ids.astype(np.int64)))
    return matrix, held_out


def generate_sbm(n: int, classes: int, p_in: float, p_out: float, d: int,
                 seed: int) -> tuple[Graph, DataSplit]:
    """Generate a planted-partition graph with noisy one-hot features.

    Nodes are split into ``classes`` equal blocks (block id = label). Each
    within-block pair is connected with probability ``p_in``, each cross-block
    pair with ``p_out``. Features are the one-hot class centroid plus unit
    Gaussian noise, so ``d >= classes`` is required. The returned split is a
    seeded 20/10/70 partition. Deterministic for a fixed seed.
    """
    if not (0 <= p_out <= p_in <= 1):
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if n % classes != 0:
        raise ValueError("n must be divisible by classes")
    if d < classes:
        raise ValueError("feature dimension must be >= classes (one-hot centroids)")

    block = n // classes
    labels = np.repeat(np.arange(classes, dtype=np.int64), block)

    iu, iv = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[iv], p_in, p_out)
    keep = _rng(seed, 0).random(iu.shape[0]) < p
    edges = np.stack([iu[keep], iv[keep]], axis=1)

    features = np.zeros((n, d), dtype=np.float64)
    features[np.arange(n), labels] = 1.0
    features += _rng(seed, 1).standard_normal((n, d))

    graph = Graph(n, edges, features, labels)
    perm = _rng(seed, 2).permutation(n)
    n_train = max(1, int(round(0.2 * n)))
    n_val = max(1, int(round(0.1 * n)))
    split = DataSplit(train=perm[:n_train],
                      validation=perm[n_train:n_train + n_val],
                      test=perm[n_train + n_val:])
    return graph, split


def seeded_split(graph: Graph, seed: int,
                 fractions: tuple[float, float] = (0.2, 0.1)) -> DataSplit:
    """Seeded train/validation/test partition of the labeled nodes."""
    labeled = np.flatnonzero(graph.labeled_mask)
    if labeled.size == 0:
        raise ValueError("graph has no labeled nodes to split")
    perm = labeled[_rng(seed, 3).permutation(labeled.size)]
    n_train = max(1, int(round(fractions[0] * labeled.size)))
    n_val = max(1, int(round(fractions[1] * labeled.size)))
    if n_train + n_val >= labeled.size:
        raise ValueError("too few labeled nodes for a 3-way split")
    return DataSplit(train=perm[:n_train],
                     validation=perm[n_train:n_train + n_val],
                     test=perm[n_train + n_val:])
