import numpy as np
import pytest

from tailgraph.diffcore import Parameter, Tensor, grad_check, no_grad
from tailgraph.encoder import (
    DegenerateInputWarning,
    EncoderParams,
    ProjectionHead,
    embed_graph,
    embed_graphs,
    encode_nodes,
    project,
    readout,
)
from tailgraph.classifier import ClassifierWeights, logits_and_ce
from tailgraph.graphdata import Graph, generate_synthetic


def _params(fdim, hidden=6, layers=2, dim=5, seed=0):
    return EncoderParams.init(fdim, hidden, layers, dim, np.random.default_rng(seed))


def _permute_graph(g: Graph, perm):
    inv = np.argsort(perm)
    attrs = g.node_attrs[perm]
    edges = [(int(inv[u]), int(inv[v])) for u, v in g.edges]
    return Graph(attrs, edges, g.label)


def test_isolated_node_layer_one_matches_hand_formula():
    params = _params(3, hidden=4, layers=1, dim=2, seed=1)
    x = np.array([[0.5, -1.0, 2.0]])
    g = Graph(x, [], 0)
    layer = encode_nodes(g, params)[0]
    w = params.layers[0].data
    expected = np.maximum(np.concatenate([x[0], np.zeros(3)]) @ w, 0.0)
    assert np.allclose(layer.data[0], expected, atol=1e-12)


def test_star_center_aggregates_mean_of_leaves():
    params = _params(2, hidden=3, layers=1, dim=2, seed=2)
    attrs = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [4.0, -1.0]])
    star = Graph(attrs, [(0, 1), (0, 2), (0, 3)], 0)
    layer = encode_nodes(star, params)[0]
    leaf_mean = attrs[1:].mean(axis=0)
    w = params.layers[0].data
    expected = np.maximum(np.concatenate([attrs[0], leaf_mean]) @ w, 0.0)
    assert np.allclose(layer.data[0], expected, atol=1e-12)


def test_node_permutation_leaves_embedding_invariant():
    rng = np.random.default_rng(3)
    ds = generate_synthetic(4, 25, 0.6, seed=3)
    params = _params(ds.feature_dim, hidden=8, layers=3, dim=6, seed=4)
    with no_grad():
        for g in ds.graphs:
            perm = rng.permutation(g.num_nodes)
            base = embed_graph(g, params).data
            permuted = embed_graph(_permute_graph(g, perm), params).data
            assert np.abs(base - permuted).max() < 1e-10


def test_feature_locality_respects_receptive_field():
    # path of 6 nodes; with 2 layers, perturbing node 0 must not reach nodes 3+
    params = _params(2, hidden=5, layers=2, dim=4, seed=5)
    attrs = np.zeros((6, 2))
    attrs[:, 0] = np.arange(6)
    edges = [(i, i + 1) for i in range(5)]
    g1 = Graph(attrs, edges, 0)
    bumped = attrs.copy()
    bumped[0] += 10.0
    g2 = Graph(bumped, edges, 0)
    with no_grad():
        layers1 = encode_nodes(g1, params)
        layers2 = encode_nodes(g2, params)
    diff = np.abs(layers1[-1].data - layers2[-1].data).sum(axis=1)
    assert diff[:3].max() > 0
    assert np.all(diff[3:] == 0.0)


def test_readout_of_constant_embeddings_matches_linear_map():
    params = _params(3, hidden=4, layers=2, dim=3, seed=6)
    v = np.array([0.3, -0.2, 0.9, 1.4])
    layers = [Tensor(np.tile(v, (5, 1))) for _ in range(2)]
    out = readout(layers, params)
    expected = np.concatenate([v, v]) @ params.readout_weights.data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_two_node_graph_hand_forward():
    # hidden = feature dim = 1 layer, every weight set by hand
    w0 = Parameter(np.array([[1.0, 0.5], [0.0, -1.0], [2.0, 0.0], [1.0, 1.0]]), name="l0")
    ro = Parameter(np.array([[1.0], [2.0]]), name="ro")
    params = EncoderParams([w0], ro)
    attrs = np.array([[1.0, 2.0], [3.0, -1.0]])
    g = Graph(attrs, [(0, 1)], 0)
    # by hand: node 0 sees [1,2 | 3,-1], node 1 sees [3,-1 | 1,2]
    h0 = np.maximum(np.array([1, 2, 3, -1.0]) @ w0.data, 0)
    h1 = np.maximum(np.array([3, -1, 1, 2.0]) @ w0.data, 0)
    pooled = (h0 + h1) / 2
    expected = pooled @ ro.data
    out = embed_graph(g, params)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_batched_encoding_matches_per_graph():
    ds = generate_synthetic(3, 10, 0.4, seed=7)
    params = _params(ds.feature_dim, hidden=7, layers=3, dim=5, seed=8)
    with no_grad():
        batched = embed_graphs(ds.graphs, params).data
        singles = np.stack([embed_graph(g, params).data for g in ds.graphs])
    assert np.abs(batched - singles).max() < 1e-10


def test_encoder_feature_dim_mismatch_raises():
    params = _params(3)
    g = Graph(np.zeros((2, 4)), [(0, 1)], 0)
    with pytest.raises(ValueError):
        encode_nodes(g, params)


def test_projection_identity_rescales_to_unit_norm():
    h = Tensor(np.array([1.2, -0.9, 2.0]))
    scale = np.linalg.norm(h.data)
    out = project(h, ProjectionHead.identity())
    assert np.allclose(out.data, h.data / scale, atol=1e-12)
    assert abs(np.linalg.norm(out.data) - 1.0) < 1e-12


def test_projection_mlp_with_identity_weights_matches_identity_head():
    dim = 4
    head = ProjectionHead(
        "mlp",
        Parameter(np.eye(dim), name="w1"),
        Parameter(np.eye(dim), name="w2"),
    )
    h = Tensor(np.abs(np.random.default_rng(9).normal(size=dim)) + 0.1)
    a = project(h, head)
    b = project(h, ProjectionHead.identity())
    assert np.allclose(a.data, b.data, atol=1e-12)


def test_projection_matrix_rows_unit_norm():
    rng = np.random.default_rng(11)
    head = ProjectionHead.mlp(6, rng)
    z = project(Tensor(rng.normal(size=(8, 6))), head)
    norms = np.linalg.norm(z.data, axis=1)
    # rows the relu zeroed out stay zero; all others land on the unit sphere
    live = norms > 0
    assert live.any()
    assert np.abs(norms[live] - 1.0).max() < 1e-12


def test_projection_zero_vector_flags_degenerate():
    with pytest.warns(DegenerateInputWarning):
        out = project(Tensor(np.zeros(5)), ProjectionHead.identity())
    assert np.array_equal(out.data, np.zeros(5))


def _ce_loss_in_layer0(ds, params, clf, labels):
    """Loss as a function of the first combine weight, for gradient checks."""

    def f(t):
        temp = EncoderParams.__new__(EncoderParams)
        temp.layers = [t, *params.layers[1:]]
        temp.readout_weights = params.readout_weights
        h = embed_graphs(ds.graphs[:6], temp)
        _, loss = logits_and_ce(h, clf, labels[:6])
        return loss

    return f


@pytest.mark.parametrize("seed", range(10))
def test_encoder_gradients_through_cross_entropy(seed):
    ds = generate_synthetic(3, 4, 0.5, seed=11)
    params = _params(ds.feature_dim, hidden=5, layers=2, dim=4, seed=12)
    clf = ClassifierWeights.init(3, 4, np.random.default_rng(13))
    labels = ds.labels()
    rng = np.random.default_rng(seed + 40)
    w0 = Tensor(params.layers[0].data + rng.normal(size=params.layers[0].shape) * 0.01)
    err = grad_check(_ce_loss_in_layer0(ds, params, clf, labels), w0)
    assert err < 1e-4
