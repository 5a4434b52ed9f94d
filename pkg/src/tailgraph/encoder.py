"""Message-passing graph encoder with multi-layer readout and the projection
heads used by the contrastive branch.

Each layer mean-aggregates neighbor embeddings (zero vector for isolated
nodes), concatenates them with the node's own embedding, and applies a linear
map plus relu. The readout mean-pools every layer's node embeddings,
concatenates the pooled vectors, and maps them linearly to the embedding
dimension, so the graph vector keeps information from all depths.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp

from .diffcore import Parameter, ShapeError, Tensor, concat, const_mm
from .graphdata import Graph

__all__ = [
    "EncoderParams",
    "ProjectionHead",
    "DegenerateInputWarning",
    "encode_nodes",
    "readout",
    "embed_graph",
    "embed_graphs",
    "project",
]


class DegenerateInputWarning(UserWarning):
    """Normalizing a zero vector: the zero vector is returned unchanged."""


class EncoderParams:
    """Per-layer combine weights plus the readout map.

    Layer l maps concatenated [self; mean-of-neighbors] features of width
    2 * d_l to the hidden width; the readout maps the L concatenated pooled
    vectors to the final embedding dimension.
    """

    def __init__(self, layers: list[Parameter], readout_weights: Parameter):
        for i in range(1, len(layers)):
            if layers[i].shape[0] != 2 * layers[i - 1].shape[1]:
                raise ValueError(
                    f"layer {i} expects input width {layers[i].shape[0] // 2}, "
                    f"previous layer outputs {layers[i - 1].shape[1]}"
                )
        hidden = layers[-1].shape[1]
        if readout_weights.shape[0] != len(layers) * hidden:
            raise ValueError(
                f"readout expects width {readout_weights.shape[0]}, "
                f"got {len(layers)} layers of width {hidden}"
            )
        self.layers = layers
        self.readout_weights = readout_weights

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def feature_dim(self) -> int:
        return self.layers[0].shape[0] // 2

    @property
    def embed_dim(self) -> int:
        return self.readout_weights.shape[1]

    @classmethod
    def init(
        cls,
        feature_dim: int,
        hidden_dim: int,
        num_layers: int,
        embed_dim: int,
        rng: np.random.Generator,
        prefix: str = "encoder",
    ) -> "EncoderParams":
        layers = []
        d_in = feature_dim
        for l in range(num_layers):
            scale = np.sqrt(2.0 / (2 * d_in))
            layers.append(
                Parameter.randn((2 * d_in, hidden_dim), rng, scale, name=f"{prefix}.layer{l}")
            )
            d_in = hidden_dim
        ro_scale = np.sqrt(2.0 / (num_layers * hidden_dim))
        ro = Parameter.randn(
            (num_layers * hidden_dim, embed_dim), rng, ro_scale, name=f"{prefix}.readout"
        )
        return cls(layers, ro)

    def parameters(self) -> list[Parameter]:
        return [*self.layers, self.readout_weights]


def _mean_adjacency(graph: Graph) -> np.ndarray:
    """Dense row-normalized adjacency; isolated nodes get an all-zero row."""
    n = graph.num_nodes
    a = np.zeros((n, n))
    for u, v in graph.edges:
        a[u, v] = 1.0
        a[v, u] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    np.divide(a, deg, out=a, where=deg > 0)
    return a


def encode_nodes(graph: Graph, params: EncoderParams) -> list[Tensor]:
    """Run all message-passing layers; returns one |V| x hidden matrix per layer."""
    if graph.feature_dim != params.feature_dim:
        raise ShapeError(
            f"graph features have dim {graph.feature_dim}, encoder expects {params.feature_dim}"
        )
    a_hat = _mean_adjacency(graph)
    h = Tensor(graph.node_attrs)
    outputs = []
    for w in params.layers:
        agg = const_mm(a_hat, h)
        h = (concat([h, agg], axis=1) @ w).relu()
        outputs.append(h)
    return outputs


def readout(layer_outputs: list[Tensor], params: EncoderParams) -> Tensor:
    """Mean-pool each layer, concatenate, and map to the embedding dimension."""
    if not layer_outputs:
        raise ValueError("need at least one layer output")
    pooled = [h.mean(axis=0) for h in layer_outputs]
    return concat(pooled, axis=0) @ params.readout_weights


def embed_graph(graph: Graph, params: EncoderParams) -> Tensor:
    return readout(encode_nodes(graph, params), params)


def embed_graphs(graphs: list[Graph], params: EncoderParams) -> Tensor:
    """Encode many graphs in one pass over their disjoint union.

    Equivalent to stacking ``embed_graph`` outputs but with a constant number
    of recorded operations, which is what makes training batches cheap.
    """
    if not graphs:
        raise ValueError("need at least one graph")
    sizes = [g.num_nodes for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    rows, cols, vals = [], [], []
    for gi, g in enumerate(graphs):
        off = offsets[gi]
        deg = np.zeros(g.num_nodes)
        for u, v in g.edges:
            deg[u] += 1
            deg[v] += 1
        for u, v in g.edges:
            rows.append(off + u)
            cols.append(off + v)
            vals.append(1.0 / deg[u])
            rows.append(off + v)
            cols.append(off + u)
            vals.append(1.0 / deg[v])
    a_hat = sp.csr_matrix((vals, (rows, cols)), shape=(total, total))

    p_rows = np.concatenate(
        [np.full(sizes[gi], gi) for gi in range(len(graphs))]
    )
    p_vals = np.concatenate(
        [np.full(sizes[gi], 1.0 / sizes[gi]) for gi in range(len(graphs))]
    )
    pool = sp.csr_matrix(
        (p_vals, (p_rows, np.arange(total))), shape=(len(graphs), total)
    )

    h = Tensor(np.vstack([g.node_attrs for g in graphs]))
    pooled = []
    for w in params.layers:
        agg = const_mm(a_hat, h)
        h = (concat([h, agg], axis=1) @ w).relu()
        pooled.append(const_mm(pool, h))
    return concat(pooled, axis=1) @ params.readout_weights


class ProjectionHead:
    """Either the identity map or a two-layer MLP, always L2-normalized."""

    def __init__(self, kind: str, w1: Parameter | None = None, w2: Parameter | None = None):
        if kind not in ("identity", "mlp"):
            raise ValueError(f"unknown projection head kind {kind!r}")
        if kind == "identity" and (w1 is not None or w2 is not None):
            raise ValueError("identity head carries no weights")
        if kind == "mlp" and (w1 is None or w2 is None):
            raise ValueError("mlp head needs two weight matrices")
        self.kind = kind
        self.w1 = w1
        self.w2 = w2

    @classmethod
    def identity(cls) -> "ProjectionHead":
        return cls("identity")

    @classmethod
    def mlp(cls, dim: int, rng: np.random.Generator, prefix: str = "projection") -> "ProjectionHead":
        scale = np.sqrt(2.0 / dim)
        return cls(
            "mlp",
            Parameter.randn((dim, dim), rng, scale, name=f"{prefix}.w1"),
            Parameter.randn((dim, dim), rng, scale, name=f"{prefix}.w2"),
        )

    def parameters(self) -> list[Parameter]:
        return [] if self.kind == "identity" else [self.w1, self.w2]


def _l2_normalize(t: Tensor) -> Tensor:
    if t.ndim == 1:
        sq = (t * t).sum()
        if float(sq.data) == 0.0:
            warnings.warn("normalizing a zero vector", DegenerateInputWarning)
            return t * 0.0
        return t * (sq ** -0.5)
    sq = (t * t).sum(axis=1, keepdims=True)
    if np.any(sq.data == 0.0):
        warnings.warn("normalizing a zero row", DegenerateInputWarning)
        # guard keeps zero rows zero without dividing by zero
        return t * ((sq + 1e-300) ** -0.5)
    return t * (sq ** -0.5)


def project(h: Tensor, head: ProjectionHead) -> Tensor:
    """Project a length-D embedding (or a B x D matrix of them) onto the unit
    sphere, through the MLP first when the head has one."""
    if head.kind == "mlp":
        h = (h @ head.w1).relu() @ head.w2
    return _l2_normalize(h)
