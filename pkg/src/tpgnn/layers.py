"""GNN building blocks: sparse aggregation, GCN update, GAT edge attention.

Aggregation computes ``out[v] = sum_u c_uv * h[u]`` with edges visited in
``(dst, src)`` order, one rounding per product and per add. The transpose
visits edges in ``(src, dst)`` order. Columns never interact, so running
either kernel on a column slice gives exactly the matching columns of the
full result.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dense
from .dense import FeatureSlice
from .errors import ContractViolation, ShapeError
from .graph import EdgeAttention, EdgeCoefficients, Graph

LEAKY_SLOPE = 0.2


def _unwrap(h):
    if isinstance(h, FeatureSlice):
        return h.data, h
    return dense.as_matrix(h), None


def _rewrap(data, proto):
    return proto.with_data(data) if proto is not None else data


def scatter_edges(out: np.ndarray, coeffs: EdgeCoefficients, h: np.ndarray, edges, *, transpose=False):
    """Accumulate the given edges into ``out`` in the order listed.

    Forward: ``out[dst] += c * h[src]``; transpose: ``out[src] += c * h[dst]``.
    """
    to, frm = (coeffs.src, coeffs.dst) if transpose else (coeffs.dst, coeffs.src)
    np.add.at(out, to[edges], coeffs.values[edges, None] * h[frm[edges]])


def aggregate(coeffs: EdgeCoefficients, h):
    """Weighted in-neighbor sum; accepts a full matrix or a ``FeatureSlice``."""
    data, proto = _unwrap(h)
    if data.shape[0] != coeffs.num_vertices:
        raise ShapeError(f"aggregate: h has {data.shape[0]} rows, graph has {coeffs.num_vertices}")
    out = np.zeros_like(data)
    scatter_edges(out, coeffs, data, slice(None))
    return _rewrap(out, proto)


def aggregate_backward(coeffs: EdgeCoefficients, grad_out):
    """Transpose of :func:`aggregate`: ``grad_in[u] = sum_v c_uv * grad_out[v]``."""
    data, proto = _unwrap(grad_out)
    if data.shape[0] != coeffs.num_vertices:
        raise ShapeError(
            f"aggregate_backward: grad has {data.shape[0]} rows, graph has {coeffs.num_vertices}"
        )
    out = np.zeros_like(data)
    scatter_edges(out, coeffs, data, coeffs.src_major, transpose=True)
    return _rewrap(out, proto)


# --- GCN update -----------------------------------------------------------


@dataclass
class LayerParams:
    W: np.ndarray
    attn: np.ndarray | None = None

    def __post_init__(self):
        self.W = dense.as_matrix(self.W)
        if self.attn is not None:
            self.attn = np.asarray(self.attn, dtype=np.float64).ravel()
            if self.attn.size != 2 * self.W.shape[1]:
                raise ShapeError(
                    f"attention vector needs {2 * self.W.shape[1]} entries, got {self.attn.size}"
                )

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


def gcn_update(a, p: LayerParams, apply_act: bool = True):
    """``relu(a @ W)`` (or ``a @ W`` without the activation); returns ``(out, pre)``."""
    pre = dense.matmul(a, p.W)
    return (dense.relu(pre) if apply_act else pre), pre


def gcn_update_backward(a, p: LayerParams, pre, grad_out, apply_act: bool = True):
    """Returns ``(grad_a, grad_W)``."""
    grad_pre = dense.relu_grad(pre, grad_out) if apply_act else dense.as_matrix(grad_out)
    return dense.matmul_nt(grad_pre, p.W), dense.matmul_tn(a, grad_pre)


# --- GAT attention --------------------------------------------------------


def attention_scores(wh, attn) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex source and destination scores ``wh @ a1`` and ``wh @ a2``."""
    wh = dense.as_matrix(wh)
    attn = np.asarray(attn, dtype=np.float64).ravel()
    c = wh.shape[1]
    if attn.size != 2 * c:
        raise ShapeError(f"attention vector needs {2 * c} entries, got {attn.size}")
    s = dense.matmul(wh, np.stack([attn[:c], attn[c:]], axis=1))
    return s[:, 0].copy(), s[:, 1].copy()


def edge_softmax(src, dst, s_src, s_dst, num_vertices: int, slope: float = LEAKY_SLOPE):
    """Leaky-ReLU edge scores normalized over each destination's listed edges.

    Works on any edge subset that contains *all* in-edges of every
    destination it touches. Returns ``(alpha, pre)`` where ``pre`` is the
    score before the leaky ReLU.
    """
    pre = s_src[src] + s_dst[dst]
    e = dense.leaky_relu(pre, slope)
    top = np.full(num_vertices, -np.inf)
    np.maximum.at(top, dst, e)
    ex = np.exp(e - top[dst])
    den = np.zeros(num_vertices)
    np.add.at(den, dst, ex)
    return ex / den[dst], pre


def edge_softmax_backward(dst, alpha, pre, grad_alpha, num_vertices: int, slope: float = LEAKY_SLOPE):
    """Gradient with respect to the pre-activation edge scores."""
    weighted = np.zeros(num_vertices)
    np.add.at(weighted, dst, alpha * grad_alpha)
    grad_e = alpha * (grad_alpha - weighted[dst])
    return dense.leaky_relu_grad(pre, grad_e, slope)


def score_backward(src, dst, grad_pre, num_vertices: int):
    """Fold per-edge score gradients onto per-vertex source/destination scores."""
    g_src = np.zeros(num_vertices)
    g_dst = np.zeros(num_vertices)
    np.add.at(g_src, src, grad_pre)
    np.add.at(g_dst, dst, grad_pre)
    return g_src, g_dst


def scores_backward(wh, attn, g_src, g_dst):
    """Map per-vertex score gradients to ``(grad_wh, grad_attn)``."""
    wh = dense.as_matrix(wh)
    attn = np.asarray(attn, dtype=np.float64).ravel()
    c = wh.shape[1]
    g = np.stack([g_src, g_dst], axis=1)
    grad_wh = dense.matmul(g, np.stack([attn[:c], attn[c:]], axis=0))
    grad_a = dense.matmul_tn(wh, g)
    return grad_wh, np.concatenate([grad_a[:, 0], grad_a[:, 1]])


@dataclass
class AttentionCache:
    h: np.ndarray
    wh: np.ndarray
    pre: np.ndarray
    alpha: np.ndarray


def gat_attention(graph: Graph, h, p: LayerParams, slope: float = LEAKY_SLOPE):
    """Single-head attention coefficients over the in-edges of ``graph``.

    Needs full-width embeddings: the leaky ReLU and softmax cannot be
    evaluated on a column slice. Returns ``(EdgeAttention, AttentionCache)``.
    """
    if isinstance(h, FeatureSlice):
        raise ContractViolation("gat_attention needs full-dimension embeddings, got a FeatureSlice")
    if p.attn is None:
        raise ContractViolation("gat_attention needs LayerParams with an attention vector")
    h = dense.as_matrix(h)
    if h.shape[0] != graph.num_vertices:
        raise ShapeError(f"gat_attention: h has {h.shape[0]} rows, graph has {graph.num_vertices}")
    wh, _ = gcn_update(h, p, apply_act=False)
    s_src, s_dst = attention_scores(wh, p.attn)
    src, dst = graph.edges()
    alpha, pre = edge_softmax(src, dst, s_src, s_dst, graph.num_vertices, slope)
    return EdgeAttention(graph, alpha), AttentionCache(h, wh, pre, alpha)


def gat_attention_backward(graph: Graph, p: LayerParams, cache: AttentionCache, grad_alpha,
                           slope: float = LEAKY_SLOPE):
    """Gradients of a scalar loss through :func:`gat_attention`.

    ``grad_alpha`` is the upstream gradient per edge (destination-major
    order). Returns ``(grad_h, grad_W, grad_attn)``.
    """
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64).ravel()
    if grad_alpha.size != graph.num_edges:
        raise ShapeError(f"grad_alpha has {grad_alpha.size} entries for {graph.num_edges} edges")
    src, dst = graph.edges()
    V = graph.num_vertices
    grad_pre = edge_softmax_backward(dst, cache.alpha, cache.pre, grad_alpha, V, slope)
    g_src, g_dst = score_backward(src, dst, grad_pre, V)
    grad_wh, grad_attn = scores_backward(cache.wh, p.attn, g_src, g_dst)
    grad_h, grad_W = gcn_update_backward(cache.h, p, cache.wh, grad_wh, apply_act=False)
    return grad_h, grad_W, grad_attn
