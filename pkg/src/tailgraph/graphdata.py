"""Graph data model: long-tailed dataset construction, splits, samplers,
contrastive-view augmentations, and a synthetic motif generator.

Datasets are immutable after construction and safe to share; samplers hold
private RNG state, one per worker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Graph",
    "Dataset",
    "LongTailSpec",
    "Batch",
    "InsufficientDataError",
    "make_longtail",
    "split",
    "InstanceBalancedSampler",
    "ClassBalancedSampler",
    "augment",
    "generate_synthetic",
    "save_jsonl",
    "load_jsonl",
    "subset",
]


class InsufficientDataError(ValueError):
    """A class does not have enough samples for the requested operation."""


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


class Graph:
    """Attributed undirected graph with an integer class label.

    Edges are stored as (min, max) index pairs; self-loops and duplicates are
    rejected, and every endpoint must index a node.
    """

    __slots__ = ("node_attrs", "edges", "label")

    def __init__(self, node_attrs, edges, label: int):
        attrs = np.asarray(node_attrs, dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[0] < 1:
            raise ValueError(f"node_attrs must be a |V|x F matrix with |V| >= 1, got shape {attrs.shape}")
        n = attrs.shape[0]
        seen = set()
        norm_edges = []
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) endpoint out of range for {n} nodes")
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            e = (u, v) if u < v else (v, u)
            if e in seen:
                raise ValueError(f"duplicate edge {e}")
            seen.add(e)
            norm_edges.append(e)
        self.node_attrs = attrs
        self.edges = norm_edges
        self.label = int(label)

    @property
    def num_nodes(self) -> int:
        return self.node_attrs.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.node_attrs.shape[1]

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def __repr__(self):
        return f"Graph(|V|={self.num_nodes}, |E|={self.num_edges}, label={self.label})"


class Dataset:
    """An ordered collection of graphs with consistent feature dimension."""

    __slots__ = ("graphs", "class_counts", "feature_dim")

    def __init__(self, graphs: list[Graph]):
        if not graphs:
            raise ValueError("dataset must contain at least one graph")
        fdim = graphs[0].feature_dim
        for i, g in enumerate(graphs):
            if g.feature_dim != fdim:
                raise ValueError(
                    f"graph {i} has feature dim {g.feature_dim}, expected {fdim}"
                )
        labels = np.array([g.label for g in graphs], dtype=np.int64)
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        num_classes = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=num_classes)
        self.graphs = list(graphs)
        self.class_counts = counts
        self.feature_dim = fdim

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i: int) -> Graph:
        return self.graphs[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def indices_by_class(self) -> list[np.ndarray]:
        labels = self.labels()
        return [np.flatnonzero(labels == c) for c in range(self.num_classes)]


@dataclass(frozen=True)
class LongTailSpec:
    """Realized long-tail statistics: head count, order, and counts."""

    imbalance_factor: float
    head_count: int
    class_order: tuple[int, ...]  # classes sorted by retained count, descending
    realized_counts: tuple[int, ...]  # indexed by class id


@dataclass(frozen=True)
class Batch:
    graph_indices: list[int]
    view_tag: str = "original"  # original | augmented

    def __post_init__(self):
        if not self.graph_indices:
            raise ValueError("batch must be nonempty")


def subset(dataset: Dataset, indices) -> Dataset:
    return Dataset([dataset.graphs[int(i)] for i in indices])


# ----------------------------------------------------------------------
# long-tail construction and splitting
# ----------------------------------------------------------------------
def make_longtail(dataset: Dataset, imbalance_factor: float, seed: int):
    """Subsample so per-class counts decay geometrically from head to tail.

    Class at sorted rank c keeps ``round(n_1 * IF^(-c/(C-1)))`` samples, which
    hits the requested imbalance factor exactly at both ends. ``IF == 1``
    truncates every class to the smallest class size (exactly balanced).
    Returns the reduced dataset plus the realized tail statistics.
    """
    if imbalance_factor < 1:
        raise ValueError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    num_classes = dataset.num_classes
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    counts = dataset.class_counts
    if counts.min() < 1:
        raise InsufficientDataError("every class needs at least one sample")

    order = sorted(range(num_classes), key=lambda c: (-counts[c], c))
    head = int(counts[order[0]])
    targets = {}
    if imbalance_factor == 1.0:
        floor_count = int(counts.min())
        for c in order:
            targets[c] = floor_count
        head = floor_count
    else:
        for rank, c in enumerate(order):
            t = _round_half_up(head * imbalance_factor ** (-rank / (num_classes - 1)))
            targets[c] = max(1, t)
    for c in order:
        if counts[c] < targets[c]:
            raise InsufficientDataError(
                f"class {c} has {counts[c]} samples, needs {targets[c]}"
            )

    rng = np.random.default_rng(seed)
    by_class = dataset.indices_by_class()
    keep: list[int] = []
    for c in range(num_classes):
        chosen = rng.choice(by_class[c], size=targets[c], replace=False)
        keep.extend(int(i) for i in chosen)
    keep.sort()

    reduced = subset(dataset, keep)
    realized = tuple(int(targets[c]) for c in range(num_classes))
    tail = min(realized)
    spec = LongTailSpec(
        imbalance_factor=head / tail,
        head_count=head,
        class_order=tuple(order),
        realized_counts=realized,
    )
    return reduced, spec


def split(dataset: Dataset, seed: int):
    """Stratified 60/20/20 train/val/test split, deterministic under seed.

    Per class: val and test each get floor(0.2 n); the remainder goes to
    train, so every class with >= 5 samples keeps at least one val and one
    test sample.
    """
    counts = dataset.class_counts
    for c, n in enumerate(counts):
        if n < 5:
            raise InsufficientDataError(f"class {c} has {n} samples, needs >= 5 to split")

    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    val_idx: list[int] = []
    test_idx: list[int] = []
    for cls_indices in dataset.indices_by_class():
        n = len(cls_indices)
        perm = rng.permutation(cls_indices)
        n_val = n // 5
        n_test = n // 5
        n_train = n - n_val - n_test
        train_idx.extend(int(i) for i in perm[:n_train])
        val_idx.extend(int(i) for i in perm[n_train : n_train + n_val])
        test_idx.extend(int(i) for i in perm[n_train + n_val :])
    train_idx.sort()
    val_idx.sort()
    test_idx.sort()
    return subset(dataset, train_idx), subset(dataset, val_idx), subset(dataset, test_idx)


# ----------------------------------------------------------------------
# samplers
# ----------------------------------------------------------------------
class InstanceBalancedSampler:
    """Uniform over samples: one fresh permutation per epoch, consumed in
    order, so expected per-class frequency follows the class sizes."""

    def __init__(self, dataset: Dataset, rng: np.random.Generator):
        self._n = len(dataset)
        self._rng = rng
        self._perm = self._rng.permutation(self._n)
        self._pos = 0

    def sample(self, batch_size: int) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        out: list[int] = []
        while len(out) < batch_size:
            if self._pos >= self._n:
                self._perm = self._rng.permutation(self._n)
                self._pos = 0
            take = min(batch_size - len(out), self._n - self._pos)
            out.extend(int(i) for i in self._perm[self._pos : self._pos + take])
            self._pos += take
        return Batch(out)


class ClassBalancedSampler:
    """Uniform over classes, then uniform within the class, with replacement."""

    def __init__(self, dataset: Dataset, rng: np.random.Generator):
        self._by_class = dataset.indices_by_class()
        for c, idx in enumerate(self._by_class):
            if len(idx) == 0:
                raise RuntimeError(f"class {c} is empty; class-balanced sampling impossible")
        self._rng = rng

    def sample(self, batch_size: int) -> Batch:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        num_classes = len(self._by_class)
        out: list[int] = []
        for _ in range(batch_size):
            c = int(self._rng.integers(num_classes))
            pool = self._by_class[c]
            out.append(int(pool[self._rng.integers(len(pool))]))
        return Batch(out)


# ----------------------------------------------------------------------
# augmentations
# ----------------------------------------------------------------------
def _connected_components(n: int, edges) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp = [s]
        seen[s] = True
        queue = [s]
        while queue:
            u = queue.pop()
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    comp.append(w)
                    queue.append(w)
        comps.append(sorted(comp))
    return comps


def _articulation_nodes(graph: Graph) -> set[int]:
    """Nodes whose removal increases the component count (brute force)."""
    n = graph.num_nodes
    if n <= 2:
        return set()
    base = len(_connected_components(n, graph.edges))
    arts = set()
    for v in range(n):
        rest = [u for u in range(n) if u != v]
        remap = {u: i for i, u in enumerate(rest)}
        sub_edges = [(remap[a], remap[b]) for a, b in graph.edges if a != v and b != v]
        if len(_connected_components(n - 1, sub_edges)) > base:
            arts.add(v)
    return arts


def _induced_subgraph(graph: Graph, kept: list[int]) -> Graph:
    kept_sorted = sorted(kept)
    remap = {u: i for i, u in enumerate(kept_sorted)}
    edges = [
        (remap[u], remap[v])
        for u, v in graph.edges
        if u in remap and v in remap
    ]
    return Graph(graph.node_attrs[kept_sorted], edges, graph.label)


def _augment_edge_permutation(graph: Graph, ratio: float, rng, stats) -> Graph:
    k = _round_half_up(ratio * graph.num_edges)
    if k == 0:
        return Graph(graph.node_attrs.copy(), list(graph.edges), graph.label)
    n = graph.num_nodes
    edge_set = set(graph.edges)
    positions = rng.choice(graph.num_edges, size=min(k, graph.num_edges), replace=False)
    edges = list(graph.edges)
    for pos in sorted(int(p) for p in positions):
        old = edges[pos]
        edge_set.discard(old)
        new_edge = None
        for _ in range(200):
            u = int(rng.integers(n))
            v = int(rng.integers(n))
            if u == v:
                continue
            e = (u, v) if u < v else (v, u)
            if e == old or e in edge_set:
                continue
            new_edge = e
            break
        if new_edge is None:
            # dense graph with no free slot; keep the original edge
            if stats is not None:
                stats["edge_permutation_kept"] = stats.get("edge_permutation_kept", 0) + 1
            edge_set.add(old)
        else:
            edges[pos] = new_edge
            edge_set.add(new_edge)
    return Graph(graph.node_attrs.copy(), edges, graph.label)


def _augment_attribute_masking(graph: Graph, ratio: float, rng) -> Graph:
    fdim = graph.feature_dim
    k = _round_half_up(ratio * fdim)
    attrs = graph.node_attrs.copy()
    if k > 0:
        for v in range(graph.num_nodes):
            cols = rng.choice(fdim, size=min(k, fdim), replace=False)
            attrs[v, cols] = 0.0
    return Graph(attrs, list(graph.edges), graph.label)


def _augment_node_dropping(graph: Graph, ratio: float, rng) -> Graph:
    n = graph.num_nodes
    k = min(_round_half_up(ratio * n), n - 1)
    if k == 0:
        return Graph(graph.node_attrs.copy(), list(graph.edges), graph.label)
    arts = _articulation_nodes(graph)
    safe = [v for v in range(n) if v not in arts]
    drop: list[int] = []
    if safe:
        take = min(k, len(safe))
        drop.extend(int(v) for v in rng.choice(safe, size=take, replace=False))
    if len(drop) < k:
        rest = [v for v in range(n) if v not in drop]
        extra = rng.choice(rest, size=k - len(drop), replace=False)
        drop.extend(int(v) for v in extra)
    kept = [v for v in range(n) if v not in set(drop)]
    out = _induced_subgraph(graph, kept)
    comps = _connected_components(out.num_nodes, out.edges)
    if len(comps) > 1:
        largest = max(comps, key=lambda c: (len(c), -c[0]))
        out = _induced_subgraph(out, largest)
    return out


def _augment_subgraph(graph: Graph, ratio: float, rng) -> Graph:
    n = graph.num_nodes
    target = max(1, _round_half_up((1.0 - ratio) * n))
    adj = graph.neighbors()
    start = int(rng.integers(n))
    kept = {start}
    current = start
    stuck = 0
    while len(kept) < target and stuck < 10 * n:
        nbrs = adj[current]
        if nbrs:
            current = int(nbrs[rng.integers(len(nbrs))])
            if current not in kept:
                kept.add(current)
                stuck = 0
                continue
        stuck += 1
        # restart the walk from a random node already kept
        pool = sorted(kept)
        current = int(pool[rng.integers(len(pool))])
    return _induced_subgraph(graph, sorted(kept))


def augment(graph: Graph, ratio: float, rng: np.random.Generator, stats: dict | None = None) -> Graph:
    """Produce a label-preserving contrastive view with one of four strategies:
    edge permutation, attribute masking, node dropping, or random-walk subgraph.

    Strategy is chosen uniformly. Graphs too small for node dropping or
    subgraph sampling fall back to attribute masking (counted in ``stats``).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    choice = int(rng.integers(4))
    if choice in (2, 3) and graph.num_nodes < 2:
        if stats is not None:
            stats["fallback_attribute_masking"] = stats.get("fallback_attribute_masking", 0) + 1
        choice = 1
    if choice == 0:
        return _augment_edge_permutation(graph, ratio, rng, stats)
    if choice == 1:
        return _augment_attribute_masking(graph, ratio, rng)
    if choice == 2:
        return _augment_node_dropping(graph, ratio, rng)
    return _augment_subgraph(graph, ratio, rng)


# ----------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------
def generate_synthetic(num_classes: int, per_class: int, noise: float, seed: int) -> Dataset:
    """Generate a motif dataset: class c carries a cycle of length 3 + c
    attached to a small random background, with class-mean node features.

    Structure and features are both label-informative: a linear probe on mean
    features separates noiseless classes, and the per-class cycle length makes
    subgraph-containment retrieval meaningful. Feature means come in pairs,
    each second-half class sitting close to a first-half partner, so under a
    long-tailed split the rare classes overlap populous ones - the confusion
    pattern that biased classifiers suffer from most.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    fdim = num_classes
    half = (num_classes + 1) // 2
    graphs: list[Graph] = []
    for c in range(num_classes):
        cycle_len = 3 + c
        for _ in range(per_class):
            bg = int(rng.integers(2, 5))
            n = cycle_len + bg
            edges = [(i, (i + 1) % cycle_len) for i in range(cycle_len)]
            # random background tree: acyclic, so the motif ring is the only
            # cycle and ring containment separates classes exactly
            for j in range(cycle_len + 1, n):
                anchor = int(rng.integers(cycle_len, j))
                edges.append((anchor, j))
            # bridge between motif and background
            edges.append((int(rng.integers(cycle_len)), cycle_len + int(rng.integers(bg))))
            mu = np.zeros(fdim)
            if c < half:
                mu[c] = 1.0
            else:
                mu[c - half] = 1.0
                mu[c] = 0.8
            attrs = mu + noise * rng.normal(size=(n, fdim))
            graphs.append(Graph(attrs, edges, c))
    return Dataset(graphs)


# ----------------------------------------------------------------------
# JSON-lines persistence
# ----------------------------------------------------------------------
def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for g in dataset.graphs:
            rec = {
                "nodes": [[float(x) for x in row] for row in g.node_attrs],
                "edges": [[int(u), int(v)] for u, v in g.edges],
                "label": int(g.label),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_jsonl(path) -> Dataset:
    """Read one graph per line; malformed lines are rejected by line number."""
    graphs: list[Graph] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                graphs.append(Graph(rec["nodes"], rec["edges"], rec["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed graph record ({exc})") from exc
    return Dataset(graphs)
