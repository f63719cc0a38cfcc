"""Decoupled GNN model: vertex MLP, then ``rounds`` of ``gamma * A`` propagation.

For the GAT variant, edge attention is computed once per step from the MLP
output and used as the propagation operator. The single-worker
:func:`decoupled_step` is the reference every distributed engine is checked
against.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .dense import FeatureSlice
from .errors import ConfigError, ContractViolation, ShapeError
from .graph import EdgeAttention, EdgeCoefficients, Graph, NormMode, compute_norm
from .layers import (
    LEAKY_SLOPE,
    LayerParams,
    aggregate,
    aggregate_backward,
    attention_scores,
    edge_softmax,
    edge_softmax_backward,
    gat_attention,
    gcn_update,
    gcn_update_backward,
    score_backward,
    scores_backward,
)


class ModelKind(str, enum.Enum):
    GCN = "gcn"
    DECOUPLED_GCN = "decoupled-gcn"
    DECOUPLED_GAT = "decoupled-gat"

    @property
    def decoupled(self) -> bool:
        return self is not ModelKind.GCN


@dataclass
class DecoupledConfig:
    layer_dims: list[int]
    prop_rounds: int = 2
    gamma: float = 1.0
    model_kind: ModelKind = ModelKind.DECOUPLED_GCN
    norm: NormMode = NormMode.SYM_SELF_LOOP

    def __post_init__(self):
        self.model_kind = ModelKind(self.model_kind)
        self.norm = NormMode(self.norm)
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2:
            raise ConfigError("layer_dims needs at least an input and an output size")
        if any(d < 1 for d in self.layer_dims):
            raise ConfigError("layer dimensions must be positive")
        if self.prop_rounds < 0:
            raise ConfigError("prop_rounds must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")

    @property
    def nn_depth(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def is_gat(self) -> bool:
        return self.model_kind is ModelKind.DECOUPLED_GAT


def init_params(layer_dims, seed: int, attention: bool = False) -> list[LayerParams]:
    """Glorot-initialized weights; with ``attention`` the last layer gets an attention vector."""
    params = []
    for i, (din, dout) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        attn = None
        if attention and i == len(layer_dims) - 2:
            attn = dense.glorot_init(2 * dout, 1, seed + 1000 + i).ravel()
        params.append(LayerParams(dense.glorot_init(din, dout, seed + i), attn))
    return params


# --- MLP ------------------------------------------------------------------


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pres: list[np.ndarray] = field(default_factory=list)


def mlp_forward(x, params: list[LayerParams]):
    """Stacked ``gcn_update`` layers; ReLU on every layer but the last."""
    h = dense.as_matrix(x)
    if h.shape[1] != params[0].in_dim:
        raise ShapeError(f"mlp input has {h.shape[1]} columns, first layer expects {params[0].in_dim}")
    cache = MlpCache()
    for i, p in enumerate(params):
        cache.inputs.append(h)
        h, pre = gcn_update(h, p, apply_act=i < len(params) - 1)
        cache.pres.append(pre)
    return h, cache


def mlp_backward(cache: MlpCache, params: list[LayerParams], grad_out):
    """Returns ``(weight grads per layer, grad wrt the MLP input)``."""
    g = dense.as_matrix(grad_out)
    grads = [None] * len(params)
    for i in reversed(range(len(params))):
        g, grads[i] = gcn_update_backward(cache.inputs[i], params[i], cache.pres[i], g,
                                          apply_act=i < len(params) - 1)
    return grads, g


# --- propagation ----------------------------------------------------------


def _scaled(x, gamma):
    if isinstance(x, FeatureSlice):
        return x.with_data(gamma * x.data)
    return gamma * x


def propagate(z0, coeffs: EdgeCoefficients, gamma: float, rounds: int):
    """``(gamma * A)^rounds @ z0``; works on full matrices and column slices."""
    z = z0
    for _ in range(rounds):
        z = _scaled(aggregate(coeffs, z), gamma)
    return z


def propagate_backward(grad, coeffs: EdgeCoefficients, gamma: float, rounds: int):
    """Adjoint of :func:`propagate`. Needs no stored intermediates."""
    g = grad
    for _ in range(rounds):
        g = _scaled(aggregate_backward(coeffs, g), gamma)
    return g


# --- attention ------------------------------------------------------------


def attention_structure(graph: Graph) -> Graph:
    """Edge set attention is computed over: the undirected graph plus self-loops."""
    return compute_norm(graph, NormMode.SYM_SELF_LOOP).structure


def attention_for_dsts(structure: Graph, s_src, s_dst, dst_vertices, slope=LEAKY_SLOPE):
    """Attention on the in-edges of ``dst_vertices`` only.

    Returns ``(edge_ids, alpha, pre)`` with edge ids into the destination-major
    edge order of ``structure``.
    """
    dst_vertices = np.asarray(dst_vertices, dtype=np.int64)
    ip = structure.in_indptr
    if dst_vertices.size:
        edge_ids = np.concatenate([np.arange(ip[v], ip[v + 1]) for v in dst_vertices])
    else:
        edge_ids = np.zeros(0, dtype=np.int64)
    src, dst = structure.edges()
    alpha, pre = edge_softmax(src[edge_ids], dst[edge_ids], s_src, s_dst,
                              structure.num_vertices, slope)
    return edge_ids, alpha, pre


def precompute_gat_attention(ctx, structure: Graph, owned_vertices, owned_wh, attn):
    """Distributed attention precompute, run by every worker of a group.

    Each worker scores its owned vertices from their full-width transformed
    embeddings ``owned_wh`` and shares the scores; it then computes the
    attention of every in-edge of its owned vertices and shares those. All
    workers end with bitwise-identical ``(EdgeAttention, pre)``, where
    ``pre`` holds the per-edge scores before the leaky ReLU.
    """
    if isinstance(owned_wh, FeatureSlice):
        raise ContractViolation("attention precompute needs full-dimension embeddings")
    owned_vertices = np.asarray(owned_vertices, dtype=np.int64)
    V = structure.num_vertices
    s_src_own, s_dst_own = attention_scores(owned_wh, attn)
    keys, scores = ctx.all_share(owned_vertices, np.stack([s_src_own, s_dst_own], axis=1),
                                 total_keys=V)
    s_src = np.asarray(scores[:, 0])
    s_dst = np.asarray(scores[:, 1])
    edge_ids, alpha, _ = attention_for_dsts(structure, s_src, s_dst, owned_vertices)
    _, merged = ctx.all_share(edge_ids, alpha, total_keys=structure.num_edges)
    src, dst = structure.edges()
    return EdgeAttention(structure, merged), s_src[src] + s_dst[dst]


def attention_grad_from_scores(structure: Graph, alpha, pre, grad_alpha, slope=LEAKY_SLOPE):
    """Per-vertex score gradients ``(g_src, g_dst)`` from per-edge attention gradients."""
    src, dst = structure.edges()
    V = structure.num_vertices
    grad_pre = edge_softmax_backward(dst, alpha, pre, grad_alpha, V, slope)
    return score_backward(src, dst, grad_pre, V)


# --- full step ------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    nll: float
    grads: list[np.ndarray]
    attn_grad: np.ndarray | None
    logits: np.ndarray


def decoupled_step(config: DecoupledConfig, params: list[LayerParams], graph: Graph, x, labels,
                   train_mask, norm: EdgeCoefficients | None = None) -> StepResult:
    """One forward/backward pass of the decoupled model on a single worker.

    MLP -> (attention) -> propagation -> cross-entropy -> propagation adjoint
    -> MLP backward. Attention weights are treated as constants during the
    backward pass except when ``prop_rounds == 1``, where the gradient
    through the attention scores is included.
    """
    lhat, cache = mlp_forward(x, params)
    acache = None
    if config.is_gat:
        structure = attention_structure(graph)
        coeffs, acache = gat_attention(structure, cache.inputs[-1], params[-1])
    else:
        coeffs = norm if norm is not None else compute_norm(graph, config.norm)
    z = propagate(lhat, coeffs, config.gamma, config.prop_rounds)
    n_train = int(np.asarray(train_mask, dtype=bool).sum())
    nll, gz = dense.softmax_xent_sum(z, labels, train_mask, n_train)
    glhat = propagate_backward(gz, coeffs, config.gamma, config.prop_rounds)
    attn_grad = None
    if config.is_gat:
        attn_grad = np.zeros_like(params[-1].attn)
        if config.prop_rounds == 1:
            src, dst = coeffs.structure.edges()
            grad_alpha = config.gamma * np.sum(gz[dst] * lhat[src], axis=1)
            g_src, g_dst = attention_grad_from_scores(coeffs.structure, acache.alpha, acache.pre,
                                                      grad_alpha)
            grad_wh, attn_grad = scores_backward(lhat, params[-1].attn, g_src, g_dst)
            glhat = glhat + grad_wh
    grads, _ = mlp_backward(cache, params, glhat)
    return StepResult(nll / n_train, nll, grads, attn_grad, z)
