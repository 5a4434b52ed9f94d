"""Neural subgraph-matching retrieval.

A frozen, pre-trained matcher scores how cheaply a query graph's edge
embeddings align onto a corpus graph's: three message-passing rounds produce
symmetrized edge embeddings, a Gumbel-Sinkhorn relaxation produces a soft
edge permutation, and the hinged residual of the alignment is the distance.
The matcher is trained with a margin ranking loss on mined
(query, containing-graph, broken-copy) triples whose ground truth is
certified by exact subgraph-isomorphism checks.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffcore import (
    Parameter,
    ShapeError,
    Tensor,
    concat,
    const_mm,
    load_checkpoint,
    no_grad,
    save_checkpoint,
    stack_rows,
)
from .graphdata import Dataset, Graph, save_jsonl
from .optim import Adam

__all__ = [
    "RetrieverParams",
    "CorpusIndex",
    "RetrievalResult",
    "MinedTriple",
    "vf2_subgraph_iso",
    "mine_pairs",
    "walk_return_features",
    "embed_edges",
    "gumbel_sinkhorn",
    "distance",
    "train_retriever",
    "retrieve_topq",
    "fuse_retrieved",
]


# ----------------------------------------------------------------------
# exact subgraph isomorphism
# ----------------------------------------------------------------------
def vf2_subgraph_iso(pattern: Graph, target: Graph) -> bool:
    """True iff `pattern` maps injectively into `target` preserving edges.

    Structure only; node attributes are ignored. Backtracking with
    feasibility pruning: candidates must have enough degree and enough
    unused neighbors to host the pattern node's remaining neighborhood.
    """
    np_, nt = pattern.num_nodes, target.num_nodes
    if np_ > nt or pattern.num_edges > target.num_edges:
        return False

    p_adj = [set() for _ in range(np_)]
    for u, v in pattern.edges:
        p_adj[u].add(v)
        p_adj[v].add(u)
    t_adj = [set() for _ in range(nt)]
    for u, v in target.edges:
        t_adj[u].add(v)
        t_adj[v].add(u)

    # visit pattern nodes in BFS order from the highest-degree node so each
    # new node usually touches the partial mapping
    order: list[int] = []
    seen = [False] * np_
    for start in sorted(range(np_), key=lambda v: -len(p_adj[v])):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        while queue:
            u = queue.pop(0)
            order.append(u)
            for w in sorted(p_adj[u]):
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)

    mapping: dict[int, int] = {}
    used: set[int] = set()

    def feasible(p: int, t: int) -> bool:
        if len(t_adj[t]) < len(p_adj[p]):
            return False
        unmapped_nbrs = 0
        for pn in p_adj[p]:
            if pn in mapping:
                if mapping[pn] not in t_adj[t]:
                    return False
            else:
                unmapped_nbrs += 1
        free_nbrs = sum(1 for tn in t_adj[t] if tn not in used)
        return free_nbrs >= unmapped_nbrs

    def backtrack(depth: int) -> bool:
        if depth == np_:
            return True
        p = order[depth]
        for t in range(nt):
            if t in used:
                continue
            if feasible(p, t):
                mapping[p] = t
                used.add(t)
                if backtrack(depth + 1):
                    return True
                del mapping[p]
                used.discard(t)
        return False

    return backtrack(0)


# ----------------------------------------------------------------------
# training-pair mining
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class MinedTriple:
    query: Graph
    positive: Graph
    negative: Graph


def _bfs_subgraph(graph: Graph, rng: np.random.Generator, size: int | None = None) -> Graph:
    """Connected induced subgraph grown breadth-first to a random size."""
    n = graph.num_nodes
    if size is None:
        lo = min(3, n - 1)
        size = int(rng.integers(lo, n))
    size = min(size, n - 1)
    adj = graph.neighbors()
    start = int(rng.integers(n))
    kept = [start]
    frontier = list(adj[start])
    in_kept = {start}
    while len(kept) < size and frontier:
        pick = int(rng.integers(len(frontier)))
        v = frontier.pop(pick)
        if v in in_kept:
            continue
        in_kept.add(v)
        kept.append(v)
        frontier.extend(w for w in adj[v] if w not in in_kept)
    kept.sort()
    remap = {u: i for i, u in enumerate(kept)}
    edges = [(remap[u], remap[v]) for u, v in graph.edges if u in remap and v in remap]
    return Graph(graph.node_attrs[kept], edges, graph.label)


def _rewire_once(graph: Graph, rng: np.random.Generator) -> Graph | None:
    """Replace one random edge with a random non-edge; None if impossible."""
    n, m = graph.num_nodes, graph.num_edges
    if m == 0 or m == n * (n - 1) // 2:
        return None
    edges = list(graph.edges)
    pos = int(rng.integers(m))
    removed = edges.pop(pos)
    present = set(edges)
    present.add(removed)
    for _ in range(200):
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u == v:
            continue
        e = (u, v) if u < v else (v, u)
        if e in present:
            continue
        edges.append(e)
        return Graph(graph.node_attrs.copy(), edges, graph.label)
    return None


def mine_pairs(
    corpus: Dataset,
    per_query: int,
    rng: np.random.Generator,
    stats: dict | None = None,
) -> list[MinedTriple]:
    """Mine (query, positive, negative) triples from a corpus.

    Queries are BFS-grown induced subgraphs, so the source graph is a
    certified positive. Negatives are larger BFS subgraphs rewired until the
    exact matcher rejects containment of the query (up to 50 attempts,
    skipped and counted otherwise); sizing the negatives at least as large
    as the query stops the matcher from learning that big graphs are always
    cheap to align into.
    """
    for i, g in enumerate(corpus.graphs):
        if g.num_nodes < 3:
            raise ValueError(f"corpus graph {i} has {g.num_nodes} nodes, need >= 3")
    triples: list[MinedTriple] = []
    for g in corpus.graphs:
        for _ in range(per_query):
            query = _bfs_subgraph(g, rng)
            if query.num_edges == 0 or not vf2_subgraph_iso(query, g):
                if stats is not None:
                    stats["skipped"] = stats.get("skipped", 0) + 1
                continue
            neg_size = int(rng.integers(query.num_nodes, g.num_nodes))
            candidate = _bfs_subgraph(g, rng, size=neg_size)
            negative = None
            for _ in range(50):
                candidate = _rewire_once(candidate, rng)
                if candidate is None:
                    break
                if not vf2_subgraph_iso(query, candidate):
                    negative = candidate
                    break
            if negative is None:
                if stats is not None:
                    stats["skipped"] = stats.get("skipped", 0) + 1
                continue
            triples.append(MinedTriple(query, g, negative))
    return triples


# ----------------------------------------------------------------------
# matcher parameters and edge embeddings
# ----------------------------------------------------------------------
class RetrieverParams:
    """Edge-embedding MPNN weights plus alignment hyperparameters.

    Message passing starts from the node attributes, optionally concatenated
    with ``walk_len`` non-backtracking closed-walk counts that make ring
    sizes visible to the local rounds. The default leaves them off: the
    plain containment scorer generalizes better from mined triples and its
    size-slack bias is what spreads retrieval toward the rare large classes.
    """

    def __init__(
        self,
        mpnn_layers: list[Parameter],
        edge_head: Parameter,
        margin: float = 0.5,
        sinkhorn_iters: int = 20,
        sinkhorn_temp: float = 0.1,
        gumbel_scale: float = 0.1,
        walk_len: int = 0,
    ):
        if margin <= 0:
            raise ValueError("margin must be positive")
        if sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be >= 1")
        if sinkhorn_temp <= 0 or gumbel_scale < 0:
            raise ValueError("temperatures must be positive, noise scale non-negative")
        if walk_len < 0:
            raise ValueError("walk_len must be non-negative")
        self.mpnn_layers = mpnn_layers
        self.edge_head = edge_head
        self.margin = margin
        self.sinkhorn_iters = sinkhorn_iters
        self.sinkhorn_temp = sinkhorn_temp
        self.gumbel_scale = gumbel_scale
        self.walk_len = walk_len

    @property
    def feature_dim(self) -> int:
        """Expected graph node-attribute width (walk features excluded)."""
        return self.mpnn_layers[0].shape[0] // 2 - self.walk_len

    @property
    def edge_dim(self) -> int:
        return self.edge_head.shape[1]

    @classmethod
    def init(
        cls,
        feature_dim: int,
        hidden_dim: int,
        edge_dim: int,
        rng: np.random.Generator,
        rounds: int = 3,
        walk_len: int = 0,
        **hyper,
    ) -> "RetrieverParams":
        layers = []
        d_in = feature_dim + walk_len
        for r in range(rounds):
            scale = np.sqrt(2.0 / (2 * d_in))
            layers.append(
                Parameter.randn((2 * d_in, hidden_dim), rng, scale, name=f"retriever.round{r}")
            )
            d_in = hidden_dim
        head = Parameter.randn(
            (3 * hidden_dim, edge_dim), rng, np.sqrt(2.0 / (3 * hidden_dim)),
            name="retriever.edge_head",
        )
        return cls(layers, head, walk_len=walk_len, **hyper)

    def parameters(self) -> list[Parameter]:
        return [*self.mpnn_layers, self.edge_head]

    def save(self, path) -> None:
        weights_path = str(path)
        payload = {
            "hyper": {
                "margin": self.margin,
                "sinkhorn_iters": self.sinkhorn_iters,
                "sinkhorn_temp": self.sinkhorn_temp,
                "gumbel_scale": self.gumbel_scale,
                "walk_len": self.walk_len,
            },
        }
        save_checkpoint({p.name: p for p in self.parameters()}, weights_path + ".weights")
        with open(weights_path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def load(cls, path) -> "RetrieverParams":
        with open(path) as fh:
            payload = json.load(fh)
        weights = load_checkpoint(str(path) + ".weights")
        layers = []
        r = 0
        while f"retriever.round{r}" in weights:
            layers.append(Parameter(weights[f"retriever.round{r}"], name=f"retriever.round{r}"))
            r += 1
        head = Parameter(weights["retriever.edge_head"], name="retriever.edge_head")
        return cls(layers, head, **payload["hyper"])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(p.data.tobytes())
        h.update(
            f"{self.margin!r}|{self.sinkhorn_iters}|{self.sinkhorn_temp!r}|"
            f"{self.gumbel_scale!r}|{self.walk_len}".encode()
        )
        return h.hexdigest()


def walk_return_features(graph: Graph, walk_len: int) -> np.ndarray:
    """Per-node counts of non-backtracking closed walks of length 3..walk_len+2.

    Non-backtracking walks cannot reverse an edge, so on a tree these counts
    are all zero and on a ring of length m a node scores exactly at length m.
    That makes ring-motif size visible to the matcher, which plain local
    message passing cannot distinguish. Computed by powering the directed
    edge-adjacency matrix; cheap at desk scale.
    """
    n = graph.num_nodes
    if walk_len == 0 or graph.num_edges == 0:
        return np.zeros((n, walk_len))
    darts = []
    for u, v in graph.edges:
        darts.append((u, v))
        darts.append((v, u))
    idx = {d: i for i, d in enumerate(darts)}
    m = len(darts)
    b = np.zeros((m, m))
    adj = graph.neighbors()
    for (u, v), i in idx.items():
        for w in adj[v]:
            if w != u:
                b[i, idx[(v, w)]] = 1.0
    feats = np.zeros((n, walk_len))
    power = b @ b  # length-2 walks
    for k in range(walk_len):
        power = power @ b  # now length 3 + k
        diag = np.diag(power)
        for (u, _v), i in idx.items():
            feats[u, k] += diag[i]
    # a node on a plain ring scores 2 (one walk per orientation); scale so
    # ring membership reads as 1.0, comparable to attribute magnitudes
    return feats * 0.5


def _node_embeddings(graph: Graph, params: RetrieverParams) -> Tensor:
    n = graph.num_nodes
    a = np.zeros((n, n))
    for u, v in graph.edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    np.divide(a, deg, out=a, where=deg > 0)
    inputs = np.concatenate(
        [graph.node_attrs, walk_return_features(graph, params.walk_len)], axis=1
    )
    h = Tensor(inputs)
    for w in params.mpnn_layers:
        agg = const_mm(a, h)
        h = (concat([h, agg], axis=1) @ w).relu()
    return h


def embed_edges(graph: Graph, params: RetrieverParams) -> Tensor:
    """One non-negative embedding row per edge, symmetric in endpoint order."""
    if graph.feature_dim != params.feature_dim:
        raise ShapeError(
            f"graph features have dim {graph.feature_dim}, matcher expects {params.feature_dim}"
        )
    m = graph.num_edges
    if m == 0:
        return Tensor(np.zeros((0, params.edge_dim)))
    h = _node_embeddings(graph, params)
    n = graph.num_nodes
    sel_u = np.zeros((m, n))
    sel_v = np.zeros((m, n))
    for i, (u, v) in enumerate(graph.edges):
        sel_u[i, u] = 1.0
        sel_v[i, v] = 1.0
    hu = const_mm(sel_u, h)
    hv = const_mm(sel_v, h)
    prod = hu * hv
    fwd = (concat([hu, hv, prod], axis=1) @ params.edge_head).relu()
    rev = (concat([hv, hu, prod], axis=1) @ params.edge_head).relu()
    return (fwd + rev) * 0.5


# ----------------------------------------------------------------------
# differentiable alignment
# ----------------------------------------------------------------------
def _pairwise_l1_t(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable matrix of L1 distances between rows of a and rows of b."""
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.abs(diff).sum(axis=2)
    sign = np.sign(diff)

    def vjp(g):
        weighted = g[:, :, None] * sign
        return (weighted.sum(axis=1), -weighted.sum(axis=0))

    return Tensor(out, (a, b), vjp)


def gumbel_sinkhorn(
    affinity: Tensor,
    params: RetrieverParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Doubly-stochastic relaxation of the best permutation under `affinity`.

    Adds scaled Gumbel noise when training, divides by the temperature, then
    alternates row and column normalization in log space. Fully
    differentiable; rows and columns each sum to 1 within 1e-3 after the
    default 20 iterations.
    """
    if affinity.ndim != 2 or affinity.shape[0] != affinity.shape[1]:
        raise ShapeError(f"affinity must be square, got {affinity.shape}")
    la = affinity
    if training and params.gumbel_scale > 0:
        if rng is None:
            raise ValueError("training-mode Gumbel noise needs an rng")
        u = rng.random(affinity.shape)
        noise = -np.log(-np.log(u + 1e-20) + 1e-20)
        la = la + Tensor(noise * params.gumbel_scale)
    la = la * (1.0 / params.sinkhorn_temp)
    # ending each sweep on the row normalization makes the rows exactly
    # stochastic, which is what the hinged alignment residual depends on
    for _ in range(params.sinkhorn_iters):
        la = la - la.log_sum_exp(axis=0, keepdims=True)
        la = la - la.log_sum_exp(axis=1, keepdims=True)
    return la.exp()


def _pad_rows(t: Tensor, rows: int) -> Tensor:
    missing = rows - t.shape[0]
    if missing <= 0:
        return t
    return concat([t, Tensor(np.zeros((missing, t.shape[1])))], axis=0)


def distance(
    query: Graph,
    corpus_graph: Graph,
    params: RetrieverParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Alignment cost of embedding `query` into `corpus_graph` (asymmetric).

    Both edge-embedding matrices are zero-padded to the common edge count;
    the affinity is the negative L1 distance between edge embeddings. An
    edgeless query is trivially contained: distance 0.
    """
    if query.num_edges == 0:
        return Tensor(0.0)
    rq = embed_edges(query, params)
    rc = embed_edges(corpus_graph, params)
    p = max(rq.shape[0], rc.shape[0])
    rq = _pad_rows(rq, p)
    rc = _pad_rows(rc, p)
    aff = -_pairwise_l1_t(rq, rc)
    perm = gumbel_sinkhorn(aff, params, training=training, rng=rng)
    return (rq - perm @ rc).relu().sum()


def distance_value(
    rq: np.ndarray, rc: np.ndarray, params: RetrieverParams
) -> float:
    """Inference-path distance on precomputed edge embeddings (no noise).

    Runs the fused scoring kernel; agrees with the recorded-graph forward of
    ``distance`` in inference mode.
    """
    if rq.shape[0] == 0:
        return 0.0
    if rc.shape[0] == 0:
        return float(np.maximum(rq, 0.0).sum())
    return kernels.alignment_distance(rq, rc, params.sinkhorn_iters, params.sinkhorn_temp)


# ----------------------------------------------------------------------
# matcher training
# ----------------------------------------------------------------------
def train_retriever(
    triples: list[MinedTriple],
    params: RetrieverParams,
    epochs: int,
    lr: float,
    rng: np.random.Generator | None = None,
    batch_size: int = 16,
):
    """Minimize the margin ranking loss over mined triples.

    Returns the trained parameters and the per-epoch mean loss history.
    Aborts if the loss exceeds 10x its initial value.
    """
    if not triples:
        raise ValueError("need at least one training triple")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(params.parameters(), lr=lr)
    history: list[float] = []
    initial: float | None = None
    for _ in range(epochs):
        order = rng.permutation(len(triples))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            terms = []
            for ti in chunk:
                t = triples[int(ti)]
                d_pos = distance(t.query, t.positive, params, training=True, rng=rng)
                d_neg = distance(t.query, t.negative, params, training=True, rng=rng)
                terms.append((d_pos - d_neg + params.margin).relu())
            loss = _mean_scalar(terms)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        if initial is None:
            initial = mean_loss if mean_loss > 0 else 1.0
        if mean_loss > 10.0 * initial:
            raise RuntimeError(
                f"retriever training diverged: loss {mean_loss:.4g} "
                f"vs initial {initial:.4g}; history={history}"
            )
    return params, history


def _mean_scalar(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def ranking_accuracy(
    triples: list[MinedTriple], params: RetrieverParams
) -> float:
    """Fraction of triples whose positive scores closer than the negative."""
    if not triples:
        raise ValueError("need at least one triple")
    hits = 0
    with no_grad():
        for t in triples:
            d_pos = float(distance(t.query, t.positive, params).data)
            d_neg = float(distance(t.query, t.negative, params).data)
            hits += d_pos < d_neg
    return hits / len(triples)


# ----------------------------------------------------------------------
# corpus index and top-q search
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class RetrievalResult:
    neighbor_indices: list[int]
    distances: list[float]
    truncated: bool = False


class CorpusIndex:
    """Searchable corpus: graphs, labels, and precomputed edge embeddings.

    Immutable once built; the fingerprint ties the embeddings to the exact
    matcher parameters and corpus content that produced them.
    """

    def __init__(self, corpus: Dataset, params: RetrieverParams,
                 embeddings: list[np.ndarray], built_from: str):
        self.corpus = corpus
        self.params = params
        self.embeddings = embeddings
        self.built_from = built_from

    def __len__(self) -> int:
        return len(self.corpus)

    @staticmethod
    def _fingerprint(corpus: Dataset, params: RetrieverParams) -> str:
        h = hashlib.sha256()
        for g in corpus.graphs:
            h.update(np.ascontiguousarray(g.node_attrs).tobytes())
            h.update(np.array(g.edges, dtype=np.int64).tobytes())
            h.update(np.int64(g.label).tobytes())
        h.update(params.fingerprint().encode())
        return h.hexdigest()

    @classmethod
    def build(cls, corpus: Dataset, params: RetrieverParams) -> "CorpusIndex":
        with no_grad():
            embeddings = [embed_edges(g, params).data for g in corpus.graphs]
        return cls(corpus, params, embeddings, cls._fingerprint(corpus, params))

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        save_jsonl(self.corpus, os.path.join(directory, "corpus.jsonl"))
        self.params.save(os.path.join(directory, "retriever.json"))
        with open(os.path.join(directory, "embeddings.jsonl"), "w") as fh:
            for emb in self.embeddings:
                fh.write(json.dumps([[float(f"{v:.17g}") for v in row] for row in emb]) + "\n")
        with open(os.path.join(directory, "fingerprint.txt"), "w") as fh:
            fh.write(self.built_from + "\n")

    @classmethod
    def load(cls, directory) -> "CorpusIndex":
        from .graphdata import load_jsonl

        corpus = load_jsonl(os.path.join(directory, "corpus.jsonl"))
        params = RetrieverParams.load(os.path.join(directory, "retriever.json"))
        embeddings = []
        with open(os.path.join(directory, "embeddings.jsonl")) as fh:
            for line in fh:
                arr = np.array(json.loads(line), dtype=np.float64)
                embeddings.append(arr.reshape(-1, params.edge_dim) if arr.size else np.zeros((0, params.edge_dim)))
        with open(os.path.join(directory, "fingerprint.txt")) as fh:
            stored = fh.read().strip()
        if stored != cls._fingerprint(corpus, params):
            raise RuntimeError(
                "index fingerprint mismatch: embeddings are stale for these "
                "matcher parameters or corpus"
            )
        return cls(corpus, params, embeddings, stored)


def retrieve_topq(query_index: int, index: CorpusIndex, q: int) -> RetrievalResult:
    """The q corpus graphs closest to the query, self excluded.

    Distances use the inference kernel (no noise); ties break toward the
    lower corpus index. Asking for more neighbors than exist returns a
    truncated result with a warning.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    n = len(index)
    if n == 0:
        raise ValueError("index is empty")
    rq = index.embeddings[query_index]
    scored = []
    for j in range(n):
        if j == query_index:
            continue
        scored.append((distance_value(rq, index.embeddings[j], index.params), j))
    scored.sort(key=lambda item: (item[0], item[1]))
    truncated = q > len(scored)
    if truncated:
        warnings.warn(
            f"requested top-{q} but corpus holds {len(scored)} candidates", UserWarning
        )
    top = scored[:q]
    return RetrievalResult(
        neighbor_indices=[j for _, j in top],
        distances=[d for d, _ in top],
        truncated=truncated,
    )


def fuse_retrieved(h_base: Tensor, retrieved, w_attn: Parameter) -> Tensor:
    """Attention-weighted combination of retrieved graph embeddings.

    Attention logits come from a linear map of the base embedding; the output
    is the softmax-weighted sum of the retrieved embeddings, differentiable
    end to end.
    """
    if isinstance(retrieved, (list, tuple)):
        retrieved = stack_rows(list(retrieved))
    if retrieved.shape[0] != w_attn.shape[0]:
        raise ShapeError(
            f"got {retrieved.shape[0]} retrieved embeddings, attention expects {w_attn.shape[0]}"
        )
    weights = (w_attn @ h_base).row_softmax()
    return weights @ retrieved
