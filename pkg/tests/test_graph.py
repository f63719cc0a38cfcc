import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpgnn.errors import ConfigError, ParseError
from tpgnn.graph import (
    Graph,
    NormMode,
    compute_norm,
    generate_synthetic,
    load_edge_list,
    partition_chunks,
    split_masks,
)

from conftest import dense_matrix, random_graph

edge_lists = st.integers(1, 12).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)),
                                             max_size=40))
)


@given(edge_lists)
def test_csr_and_csc_describe_the_same_edges(case):
    n, pairs = case
    src = [u for u, _ in pairs]
    dst = [v for _, v in pairs]
    g = Graph(n, src, dst)
    assert g.num_edges == len(set(pairs))
    from_in = {(int(u), v) for v in range(n) for u in g.in_neighbors(v)}
    from_out = {(u, int(v)) for u in range(n) for v in g.out_neighbors(u)}
    assert from_in == from_out == set(pairs)
    for v in range(n):
        assert np.all(np.diff(g.in_neighbors(v)) > 0)
        assert np.all(np.diff(g.out_neighbors(v)) > 0)
    assert g.deg_in.sum() == g.deg_out.sum() == g.num_edges
    assert g.transpose().transpose() == g


def test_gcn_degree_coefficients_by_hand():
    # 0->2, 1->2, 2->0: deg_in = [1, 0, 2], deg_out = [1, 1, 1]
    norm = compute_norm(Graph(3, [0, 1, 2], [2, 2, 0]), NormMode.GCN_DEGREE)
    m = dense_matrix(norm)
    assert m[2, 0] == pytest.approx(1 / np.sqrt(2))
    assert m[2, 1] == pytest.approx(1 / np.sqrt(2))
    assert m[0, 2] == pytest.approx(1.0)
    # vertex 1 has no in-edges and carries itself forward
    assert m[1, 1] == 1.0


def test_sym_self_loop_on_a_path():
    norm = compute_norm(Graph(3, [0, 1], [1, 2]), NormMode.SYM_SELF_LOOP)
    m = dense_matrix(norm)
    deg = np.array([2.0, 3.0, 2.0])
    expect = (np.eye(3) + np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])) / np.sqrt(np.outer(deg, deg))
    assert np.allclose(m, expect, atol=1e-15)


def power_iteration(m, iters=500):
    x = np.ones(m.shape[0]) / np.sqrt(m.shape[0])
    for _ in range(iters):
        y = m.T @ (m @ x)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
    return float(np.sqrt(np.linalg.norm(m.T @ (m @ x))))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 25), seed=st.integers(0, 10_000), loops=st.booleans())
def test_sym_self_loop_is_symmetric_with_unit_spectral_norm(n, seed, loops):
    norm = compute_norm(random_graph(n, 2.0, seed, self_loops=loops), NormMode.SYM_SELF_LOOP)
    m = dense_matrix(norm)
    assert np.array_equal(m, m.T)
    assert np.all(np.diag(m) > 0)
    assert power_iteration(m) <= 1 + 1e-9


def test_chunks_partition_destinations_and_edges():
    g = random_graph(23, 3.0, seed=4)
    chunks = partition_chunks(g, 5)
    assert [c.dst_lo for c in chunks][0] == 0 and chunks[-1].dst_hi == 23
    assert sum(c.num_edges for c in chunks) == g.num_edges
    src, dst = g.edges()
    for c in chunks:
        sel = (dst >= c.dst_lo) & (dst < c.dst_hi)
        assert np.array_equal(c.src_set, np.unique(src[sel]))
        indptr, indices = c.local_edges
        assert indptr[-1] == c.num_edges and indices.size == c.num_edges
        order = c.src_major
        assert np.all(np.diff(indices[order]) >= 0)


@pytest.mark.parametrize("n", [0, 24])
def test_chunk_count_out_of_range(n):
    with pytest.raises(ConfigError):
        partition_chunks(random_graph(23, seed=1), n)


def test_edge_list_loader(tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("# comment\n0 1\n\n1 2\n0 1\n")
    g = load_edge_list(path, 3)
    assert g.num_edges == 2 and list(g.in_neighbors(2)) == [1]
    remapped = tmp_path / "r.txt"
    remapped.write_text("10 30\n30 20\n")
    g = load_edge_list(remapped, remap=True)
    assert g.num_vertices == 3 and set(zip(*map(list, g.edges()))) == {(0, 2), (2, 1)}


@pytest.mark.parametrize("text, lineno", [("0 1\n1\n", 2), ("0 x\n", 1), ("0 1\n0 5\n", 2)])
def test_edge_list_errors_name_the_line(tmp_path, text, lineno):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(ParseError, match=f"bad.txt:{lineno}:"):
        load_edge_list(path, 3)


def test_two_cluster_generator():
    g, x, y = generate_synthetic("two-cluster", dict(size=10, p_in=0.5, p_out=0.02), seed=3)
    assert g.num_vertices == 20 and x.shape == (20, 8)
    assert sorted(np.bincount(y)) == [10, 10]
    src, dst = g.edges()
    assert Graph(20, dst, src) == g
    same = y[src] == y[dst]
    assert same.mean() > 0.8
    g2, x2, y2 = generate_synthetic("two-cluster", dict(size=10, p_in=0.5, p_out=0.02), seed=3)
    assert g2 == g and np.array_equal(x2, x) and np.array_equal(y2, y)


def test_power_law_generator_is_skewed():
    g, x, y = generate_synthetic("power-law", dict(num_vertices=1000, exponent=2.5), seed=0)
    deg = g.deg_in
    assert g.num_vertices == 1000 and x.shape == (1000, 16) and y.max() < 4
    assert deg[:50].sum() > 10 * deg[-50:].sum()
    assert deg.max() > 10 * np.median(deg)


def test_unknown_generator():
    with pytest.raises(ConfigError):
        generate_synthetic("ring", {}, 0)


def test_split_masks_are_disjoint_with_expected_sizes():
    train, val, test = split_masks(200, 0)
    assert (train.sum(), val.sum(), test.sum()) == (130, 50, 20)
    assert not np.any(train & val) and not np.any(train & test) and not np.any(val & test)
    assert np.all(train | val | test)


def test_empty_edge_file_gives_edgeless_graph(tmp_path):
    from tpgnn.graph import load_edge_list
    path = tmp_path / "empty.txt"
    path.write_text("")
    graph = load_edge_list(path, 4)
    assert graph.num_vertices == 4 and graph.num_edges == 0


def test_single_edge_gcn_coefficient_is_one():
    from tpgnn.graph import Graph, NormMode, compute_norm
    coeffs = compute_norm(Graph(2, [0], [1]), NormMode.GCN_DEGREE)
    mask = (coeffs.src == 0) & (coeffs.dst == 1)
    assert np.isclose(coeffs.values[mask][0], 1.0)
