import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpgnn import dense
from tpgnn.collective import WorkerGroup
from tpgnn.decoupled import (
    DecoupledConfig,
    attention_structure,
    decoupled_step,
    init_params,
    mlp_backward,
    mlp_forward,
    precompute_gat_attention,
    propagate,
    propagate_backward,
)
from tpgnn.errors import ConfigError, ContractViolation
from tpgnn.graph import NormMode, compute_norm
from tpgnn.layers import gat_attention

from conftest import dense_matrix, numeric_grad, random_graph, rel_err


@pytest.mark.parametrize("kwargs", [
    dict(layer_dims=[4]),
    dict(layer_dims=[4, 0]),
    dict(layer_dims=[4, 2], prop_rounds=-1),
    dict(layer_dims=[4, 2], gamma=0.0),
    dict(layer_dims=[4, 2], gamma=1.5),
    dict(layer_dims=[4, 2], model_kind="gin"),
])
def test_config_validation(kwargs):
    with pytest.raises((ConfigError, ValueError)):
        DecoupledConfig(**kwargs)


def test_propagate_matches_matrix_power(rng):
    norm = compute_norm(random_graph(12, 3.0, seed=1))
    z0 = rng.normal(size=(12, 3))
    expect = np.linalg.matrix_power(0.7 * dense_matrix(norm), 3) @ z0
    assert np.allclose(propagate(z0, norm, 0.7, 3), expect, atol=1e-13)
    assert np.array_equal(propagate(z0, norm, 0.7, 0), z0)


def test_propagate_on_slices_is_columnwise(rng):
    norm = compute_norm(random_graph(10, 3.0, seed=2))
    z0 = rng.normal(size=(10, 5))
    full = propagate(z0, norm, 0.9, 4)
    for s in dense.col_partition(z0, 2):
        assert np.array_equal(propagate(s, norm, 0.9, 4).data, full[:, s.lo:s.hi])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), rounds=st.integers(0, 6), gamma=st.floats(0.1, 1.0),
       mode=st.sampled_from(list(NormMode)))
def test_propagation_adjointness(seed, rounds, gamma, mode):
    rng = np.random.default_rng(seed)
    norm = compute_norm(random_graph(15, 2.5, seed), mode)
    x = rng.normal(size=(15, 3))
    y = rng.normal(size=(15, 3))
    lhs = np.sum(propagate(x, norm, gamma, rounds) * y)
    rhs = np.sum(x * propagate_backward(y, norm, gamma, rounds))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), rounds=st.sampled_from([1, 5, 10]))
def test_contraction(seed, rounds):
    rng = np.random.default_rng(seed)
    norm = compute_norm(random_graph(30, 3.0, seed))
    z0 = rng.normal(size=(30, 4))
    out = propagate(z0, norm, 0.9, rounds)
    assert np.linalg.norm(out) <= 0.9 ** rounds * np.linalg.norm(z0) + 1e-9


def test_mlp_gradients(rng):
    params = init_params([4, 5, 3], seed=2)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 3))

    def loss():
        out, _ = mlp_forward(x, params)
        return float(np.sum(out * target))

    _, cache = mlp_forward(x, params)
    grads, grad_x = mlp_backward(cache, params, target)
    assert rel_err(grad_x, numeric_grad(loss, x)) < 1e-4
    for p, g in zip(params, grads):
        assert rel_err(g, numeric_grad(loss, p.W)) < 1e-4


def small_problem(seed=0, n=6):
    rng = np.random.default_rng(seed)
    graph = random_graph(n, 1.5, seed)
    x = rng.normal(size=(n, 3))
    labels = rng.integers(0, 2, n)
    mask = np.ones(n, dtype=bool)
    mask[0] = False
    return graph, x, labels, mask


@pytest.mark.parametrize("kind, rounds", [
    ("decoupled-gcn", 0), ("decoupled-gcn", 2), ("decoupled-gat", 1), ("decoupled-gat", 0),
])
def test_full_step_gradients(kind, rounds):
    graph, x, labels, mask = small_problem(seed=4)
    config = DecoupledConfig([3, 4, 2], prop_rounds=rounds, gamma=0.8, model_kind=kind)
    params = init_params(config.layer_dims, seed=1, attention=config.is_gat)

    def loss():
        return decoupled_step(config, params, graph, x, labels, mask).loss

    res = decoupled_step(config, params, graph, x, labels, mask)
    for p, g in zip(params, res.grads):
        assert rel_err(g, numeric_grad(loss, p.W)) < 1e-4
    if config.is_gat and rounds == 1:
        assert rel_err(res.attn_grad, numeric_grad(loss, params[-1].attn)) < 1e-4


def test_gat_attention_is_constant_in_backward_for_several_rounds():
    graph, x, labels, mask = small_problem(seed=5)
    config = DecoupledConfig([3, 2], prop_rounds=3, model_kind="decoupled-gat")
    params = init_params(config.layer_dims, seed=0, attention=True)
    res = decoupled_step(config, params, graph, x, labels, mask)
    assert np.array_equal(res.attn_grad, np.zeros(4))
    coeffs, _ = gat_attention(attention_structure(graph), x, params[0])
    z = propagate(x @ params[0].W, coeffs, 1.0, 3)
    assert np.allclose(res.logits, z, atol=1e-12)


@pytest.mark.parametrize("workers", [1, 3])
def test_distributed_attention_precompute_is_bitwise(workers, rng):
    graph = random_graph(11, 2.5, seed=8)
    structure = attention_structure(graph)
    params = init_params([4, 3], seed=3, attention=True)
    h = rng.normal(size=(11, 4))
    expect, cache = gat_attention(structure, h, params[0])
    wh = h @ params[0].W
    owner = np.arange(11) % workers
    group = WorkerGroup(workers)

    def body(ctx):
        mine = np.flatnonzero(owner == ctx.rank)
        return precompute_gat_attention(ctx, structure, mine, dense.matmul(h[mine], params[0].W),
                                        params[0].attn)

    for coeffs, pre in group.run(body):
        assert np.array_equal(coeffs.values, expect.values)
        assert np.array_equal(pre, cache.pre)
    ledger = group.ledger_snapshot()
    assert ledger.num_rounds("all_share") == 2
    with pytest.raises(ContractViolation):
        WorkerGroup(1).run(lambda ctx: precompute_gat_attention(
            ctx, structure, np.arange(11), dense.col_slice(wh, (0, 1)), params[0].attn))
