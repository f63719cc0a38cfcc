import numpy as np
import pytest

from tpgnn.engines import Dataset
from tpgnn.graph import Graph


def random_graph(num_vertices, avg_degree=3.0, seed=0, self_loops=False):
    rng = np.random.default_rng(seed)
    m = int(avg_degree * num_vertices)
    src = rng.integers(0, num_vertices, m)
    dst = rng.integers(0, num_vertices, m)
    if not self_loops:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    return Graph(num_vertices, src, dst)


def random_dataset(num_vertices, feature_dim=6, num_classes=3, seed=0, avg_degree=3.0):
    rng = np.random.default_rng(seed + 7919)
    graph = random_graph(num_vertices, avg_degree, seed)
    features = rng.normal(size=(num_vertices, feature_dim))
    labels = rng.integers(0, num_classes, num_vertices)
    return Dataset.from_arrays(graph, features, labels, seed)


def dense_matrix(coeffs):
    """``M[v, u] = c_uv`` so that aggregation is ``M @ h``."""
    V = coeffs.num_vertices
    m = np.zeros((V, V))
    np.add.at(m, (coeffs.dst, coeffs.src), coeffs.values)
    return m


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
