import numpy as np
import pytest

from tpgnn import dense
from tpgnn.errors import ContractViolation, ShapeError
from tpgnn.graph import Graph, NormMode, compute_norm
from tpgnn.layers import (
    LayerParams,
    aggregate,
    aggregate_backward,
    gat_attention,
    gat_attention_backward,
    gcn_update,
    gcn_update_backward,
)

from conftest import dense_matrix, numeric_grad, random_graph, rel_err


@pytest.fixture(params=[NormMode.GCN_DEGREE, NormMode.SYM_SELF_LOOP])
def norm(request):
    return compute_norm(random_graph(15, 3.0, seed=2), request.param)


def test_aggregate_matches_dense_product(norm, rng):
    h = rng.normal(size=(15, 4))
    assert np.allclose(aggregate(norm, h), dense_matrix(norm) @ h, atol=1e-13)


def test_aggregate_backward_is_the_transpose(norm, rng):
    g = rng.normal(size=(15, 4))
    assert np.allclose(aggregate_backward(norm, g), dense_matrix(norm).T @ g, atol=1e-13)


def test_slices_give_bitwise_column_blocks(norm, rng):
    h = rng.normal(size=(15, 7))
    full = aggregate(norm, h)
    back = aggregate_backward(norm, h)
    for s in dense.col_partition(h, 3):
        out = aggregate(norm, s)
        assert isinstance(out, dense.FeatureSlice) and (out.lo, out.hi) == (s.lo, s.hi)
        assert np.array_equal(out.data, full[:, s.lo:s.hi])
        assert np.array_equal(aggregate_backward(norm, s).data, back[:, s.lo:s.hi])


def test_sym_aggregate_backward_equals_forward_bitwise(rng):
    norm = compute_norm(random_graph(12, 2.5, seed=9), NormMode.SYM_SELF_LOOP)
    h = rng.normal(size=(12, 3))
    assert np.array_equal(aggregate(norm, h), aggregate_backward(norm, h))


def test_isolated_vertex_keeps_its_embedding_under_gcn_norm():
    norm = compute_norm(Graph(3, [0], [1]), NormMode.GCN_DEGREE)
    h = np.arange(6.0).reshape(3, 2)
    out = aggregate(norm, h)
    assert np.array_equal(out[0], h[0]) and np.array_equal(out[2], h[2])


def test_aggregate_row_mismatch(norm):
    with pytest.raises(ShapeError):
        aggregate(norm, np.zeros((14, 2)))
    with pytest.raises(ShapeError):
        aggregate_backward(norm, np.zeros((16, 2)))


@pytest.mark.parametrize("act", [True, False])
def test_gcn_update_gradients(rng, act):
    a = rng.normal(size=(5, 4))
    p = LayerParams(rng.normal(size=(4, 3)))
    target = rng.normal(size=(5, 3))

    def loss():
        out, _ = gcn_update(a, p, act)
        return float(np.sum(out * target))

    out, pre = gcn_update(a, p, act)
    grad_a, grad_w = gcn_update_backward(a, p, pre, target, act)
    assert rel_err(grad_a, numeric_grad(loss, a)) < 1e-4
    assert rel_err(grad_w, numeric_grad(loss, p.W)) < 1e-4


def loop_attention(graph, h, p, slope=0.2):
    """Per-destination softmax written out vertex by vertex."""
    wh = h @ p.W
    c = wh.shape[1]
    a1, a2 = p.attn[:c], p.attn[c:]
    alpha = {}
    for v in range(graph.num_vertices):
        nbrs = graph.in_neighbors(v)
        if nbrs.size == 0:
            continue
        e = np.array([wh[u] @ a1 + wh[v] @ a2 for u in nbrs])
        e = np.where(e > 0, e, slope * e)
        w = np.exp(e - e.max())
        for u, val in zip(nbrs, w / w.sum()):
            alpha[(int(u), v)] = val
    return alpha


def test_gat_attention_matches_loop_oracle(rng):
    graph = random_graph(8, 2.0, seed=5)
    h = rng.normal(size=(8, 4))
    p = LayerParams(rng.normal(size=(4, 3)), rng.normal(size=6))
    coeffs, _ = gat_attention(graph, h, p)
    oracle = loop_attention(graph, h, p)
    src, dst = graph.edges()
    for u, v, val in zip(src, dst, coeffs.values):
        assert val == pytest.approx(oracle[(int(u), int(v))], rel=1e-12)
    sums = np.zeros(8)
    np.add.at(sums, dst, coeffs.values)
    assert np.allclose(sums[graph.deg_in > 0], 1.0)


def test_gat_attention_gradients(rng):
    graph = compute_norm(random_graph(6, 2.0, seed=3), NormMode.SYM_SELF_LOOP).structure
    h = rng.normal(size=(6, 3))
    p = LayerParams(rng.normal(size=(3, 2)), rng.normal(size=4))
    weights = rng.normal(size=graph.num_edges)

    def loss():
        coeffs, _ = gat_attention(graph, h, p)
        return float(coeffs.values @ weights)

    _, cache = gat_attention(graph, h, p)
    grad_h, grad_w, grad_attn = gat_attention_backward(graph, p, cache, weights)
    assert rel_err(grad_h, numeric_grad(loss, h)) < 1e-4
    assert rel_err(grad_w, numeric_grad(loss, p.W)) < 1e-4
    assert rel_err(grad_attn, numeric_grad(loss, p.attn)) < 1e-4


def test_gat_attention_rejects_slices(rng):
    graph = random_graph(5, seed=1)
    p = LayerParams(rng.normal(size=(4, 2)), rng.normal(size=4))
    with pytest.raises(ContractViolation):
        gat_attention(graph, dense.col_slice(rng.normal(size=(5, 4)), (0, 2)), p)
    with pytest.raises(ContractViolation):
        gat_attention(graph, rng.normal(size=(5, 4)), LayerParams(p.W))


def test_layer_params_validate_attention_size(rng):
    with pytest.raises(ShapeError):
        LayerParams(rng.normal(size=(3, 2)), np.zeros(3))
