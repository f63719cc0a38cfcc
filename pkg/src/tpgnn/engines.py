"""Training engines over a shared model definition.

``single``        one worker, the correctness oracle.
``dp``            vertex-partitioned data parallelism; remote in-neighbor rows
                  are fetched each layer and source-gradient partials pushed
                  back to their owners.
``naive-tp``      feature-dimension partitioning with a gather before and a
                  split after every layer's NN update.
``decoupled-tp``  decoupled model: MLP on owned vertices, one split, all
                  propagation rounds on column slices (chunked), one gather;
                  the backward pass mirrors this.

All engines apply plain full-batch gradient descent. Distributed engines
share parameter gradients with one all-reduce per epoch.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import dense
from .collective import DEFAULT_TIMEOUT, CommLedger, LedgerRecord, WorkerGroup
from .decoupled import (
    DecoupledConfig,
    ModelKind,
    attention_grad_from_scores,
    attention_structure,
    decoupled_step,
    init_params,
    mlp_backward,
    mlp_forward,
    precompute_gat_attention,
)
from .errors import ConfigError
from .graph import EdgeCoefficients, Graph, compute_norm, partition_chunks, split_masks
from .layers import (
    LayerParams,
    aggregate,
    aggregate_backward,
    gcn_update,
    gcn_update_backward,
    scatter_edges,
    scores_backward,
)
from .scheduler import (
    build_comm_plan,
    run_chunked_propagation,
    run_chunked_propagation_backward,
)

GATHER_SPLIT = ("gather", "split")


class EngineKind(str, enum.Enum):
    SINGLE = "single"
    DATA_PARALLEL = "dp"
    NAIVE_TP = "naive-tp"
    DECOUPLED_TP = "decoupled-tp"


@dataclass
class EngineConfig:
    engine: EngineKind
    model: DecoupledConfig
    workers: int = 1
    lr: float = 0.05
    epochs: int = 10
    seed: int = 0
    chunks: int = 1
    pipelining: bool = False
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        self.engine = EngineKind(self.engine)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.chunks < 1:
            raise ConfigError("chunks must be >= 1")
        if self.engine is EngineKind.SINGLE and self.workers != 1:
            raise ConfigError("the single-worker engine runs with workers = 1")
        kind = self.model.model_kind
        if self.engine in (EngineKind.DATA_PARALLEL, EngineKind.NAIVE_TP) and kind is not ModelKind.GCN:
            raise ConfigError(f"{self.engine.value} trains the coupled GCN model only")
        if self.engine is EngineKind.DECOUPLED_TP and not kind.decoupled:
            raise ConfigError("decoupled-tp needs a decoupled model")
        dims = self.model.layer_dims
        if self.engine is EngineKind.NAIVE_TP and min(dims[:-1]) < self.workers:
            raise ConfigError(f"naive-tp splits every layer input across workers; widths {dims[:-1]} "
                              f"must each be >= workers ({self.workers})")
        if (self.engine is EngineKind.DECOUPLED_TP and self.model.prop_rounds > 0
                and dims[-1] < self.workers):
            raise ConfigError(f"decoupled-tp splits the {dims[-1]}-wide MLP output across workers; "
                              f"needs at least {self.workers} columns")


@dataclass
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    @classmethod
    def from_arrays(cls, graph, features, labels, seed: int = 0):
        train, val, test = split_masks(graph.num_vertices, seed)
        return cls(graph, np.asarray(features, dtype=np.float64), np.asarray(labels), train, val, test)

    @property
    def num_train(self) -> int:
        return int(self.train_mask.sum())


@dataclass
class EpochReport:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    edge_work: list[int]
    vertex_work: list[int]
    comm_sent: list[int]
    comm_received: list[int]
    ledger: list[LedgerRecord] = field(repr=False, default_factory=list)
    phase_times: dict[str, float] = field(default_factory=dict)


class RunResult(list):
    """The per-epoch reports, plus the run's ledger, trace and final parameters."""

    def __init__(self, reports, *, ledger: CommLedger, trace: list, params, ownership,
                 plan=None, coeffs=None):
        super().__init__(reports)
        self.ledger = ledger
        self.trace = trace
        self.params = params
        self.ownership = ownership
        self.plan = plan
        self.coeffs = coeffs

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self]


# --- coupled GCN oracle ---------------------------------------------------


@dataclass
class CoupledCache:
    aggregated: list[np.ndarray]
    pres: list[np.ndarray]


def coupled_forward(params: list[LayerParams], coeffs: EdgeCoefficients, x):
    h = x
    cache = CoupledCache([], [])
    for i, p in enumerate(params):
        a = aggregate(coeffs, h)
        h, pre = gcn_update(a, p, apply_act=i < len(params) - 1)
        cache.aggregated.append(a)
        cache.pres.append(pre)
    return h, cache


def coupled_backward(params, coeffs, cache: CoupledCache, grad_logits):
    grads = [None] * len(params)
    g = grad_logits
    for i in reversed(range(len(params))):
        ga, grads[i] = gcn_update_backward(cache.aggregated[i], params[i], cache.pres[i], g,
                                           apply_act=i < len(params) - 1)
        if i > 0:
            g = aggregate_backward(coeffs, ga)
    return grads


def _accuracy(logits, labels, mask) -> float:
    n = int(mask.sum())
    if n == 0:
        return float("nan")
    return float((logits[mask].argmax(axis=1) == labels[mask]).sum() / n)


def _apply_update(params: list[LayerParams], grads, attn_grad, lr: float):
    for p, g in zip(params, grads):
        p.W = p.W - lr * g
    if attn_grad is not None:
        params[-1].attn = params[-1].attn - lr * attn_grad


def _flatten(grads, attn_grad):
    parts = [g.ravel() for g in grads]
    if attn_grad is not None:
        parts.append(np.asarray(attn_grad).ravel())
    return np.concatenate(parts)


def _unflatten(flat, params, with_attn):
    grads, at = [], 0
    for p in params:
        n = p.W.size
        grads.append(flat[at:at + n].reshape(p.W.shape))
        at += n
    attn = flat[at:at + params[-1].attn.size].copy() if with_attn else None
    return grads, attn


def _coefficients(config: EngineConfig, graph: Graph):
    if config.model.is_gat:
        return None, attention_structure(graph)
    coeffs = compute_norm(graph, config.model.norm)
    return coeffs, coeffs.structure


def _reports(config, dataset, epochs_out, ledger, ownership):
    """Merge per-worker epoch results into reports (runs after the group joins)."""
    V = dataset.graph.num_vertices
    n = dataset.num_train
    reports = []
    for e in range(config.epochs):
        parts = [w[e] for w in epochs_out]
        total = parts[0]["nll"]
        for p in parts[1:]:
            total += p["nll"]
        width = parts[0]["logits"].shape[1]
        logits = np.empty((V, width))
        for p in parts:
            logits[p["owned"]] = p["logits"]
        tag = str(e)
        reports.append(EpochReport(
            epoch=e,
            loss=total / n,
            train_acc=_accuracy(logits, dataset.labels, dataset.train_mask),
            val_acc=_accuracy(logits, dataset.labels, dataset.val_mask),
            test_acc=_accuracy(logits, dataset.labels, dataset.test_mask),
            edge_work=[p["edge_work"] for p in parts],
            vertex_work=[p["vertex_work"] for p in parts],
            comm_sent=ledger.per_worker(tag=tag, field_name="sent"),
            comm_received=ledger.per_worker(tag=tag, field_name="received"),
            ledger=ledger.select(tag=tag),
            phase_times={k: max(p["times"][k] for p in parts) for k in parts[0]["times"]},
        ))
    return reports


class _Clock:
    def __init__(self):
        self.times: dict[str, float] = {}
        self._t = time.perf_counter()

    def lap(self, name):
        now = time.perf_counter()
        self.times[name] = self.times.get(name, 0.0) + now - self._t
        self._t = now


# --- single worker --------------------------------------------------------


def run_single_worker(config: EngineConfig, dataset: Dataset) -> RunResult:
    """Full-batch training on one worker; the reference for every other engine."""
    model = config.model
    params = init_params(model.layer_dims, config.seed, attention=model.is_gat)
    coeffs, structure = _coefficients(config, dataset.graph)
    V = dataset.graph.num_vertices
    x = dataset.features
    epochs_out = []
    for epoch in range(config.epochs):
        clock = _Clock()
        if model.model_kind is ModelKind.GCN:
            logits, cache = coupled_forward(params, coeffs, x)
            nll, grad = dense.softmax_xent_sum(logits, dataset.labels, dataset.train_mask,
                                               dataset.num_train)
            clock.lap("forward")
            grads = coupled_backward(params, coeffs, cache, grad)
            attn_grad = None
            edge_work = sum(structure.num_edges * d for d in model.layer_dims[:-1])
            edge_work += sum(structure.num_edges * d for d in model.layer_dims[1:-1])
        else:
            res = decoupled_step(model, params, dataset.graph, x, dataset.labels,
                                 dataset.train_mask, norm=coeffs)
            logits, grads, attn_grad = res.logits, res.grads, res.attn_grad
            nll = res.nll
            clock.lap("forward")
            edge_work = 2 * model.prop_rounds * structure.num_edges * model.layer_dims[-1]
        clock.lap("backward")
        _apply_update(params, grads, attn_grad, config.lr)
        clock.lap("update")
        epochs_out.append(dict(
            nll=nll, logits=logits, owned=np.arange(V), edge_work=int(edge_work),
            vertex_work=V * (len(model.layer_dims) - 1), times=clock.times,
        ))
    ledger = CommLedger(1, [])
    reports = _reports(config, dataset, [epochs_out], ledger, np.zeros(V, dtype=np.int64))
    return RunResult(reports, ledger=ledger, trace=[], params=params,
                     ownership=np.zeros(V, dtype=np.int64), coeffs=coeffs)


# --- distributed engines --------------------------------------------------


class _EpochMeter:
    """Per-worker, per-epoch counters and phase timings."""

    def __init__(self, ctx, epoch: int):
        ctx.tag = str(epoch)
        self.ctx = ctx
        self.start = dict(ctx.counters)
        self.clock = _Clock()

    def done(self, nll, logits, owned):
        c = self.ctx.counters
        return dict(
            nll=nll, logits=logits, owned=owned, times=self.clock.times,
            edge_work=c["edge_work"] - self.start["edge_work"],
            vertex_work=c["vertex_work"] - self.start["vertex_work"],
        )


def _copy_params(params):
    return [LayerParams(p.W.copy(), None if p.attn is None else p.attn.copy()) for p in params]


def _finish(config, dataset, group, outputs, ownership, plan=None, coeffs=None):
    ledger = group.ledger_snapshot()
    epochs_out = [o["epochs"] for o in outputs]
    reports = _reports(config, dataset, epochs_out, ledger, ownership)
    return RunResult(reports, ledger=ledger, trace=group.trace(), params=outputs[0]["params"],
                     ownership=ownership, plan=plan, coeffs=coeffs)


def dp_remote_sets(structure: Graph, ranges):
    """``need[i][p]``: vertices owned by worker ``p`` that worker ``i`` reads remotely."""
    V = structure.num_vertices
    N = len(ranges)
    owner = np.empty(V, dtype=np.int64)
    for w, (lo, hi) in enumerate(ranges):
        owner[lo:hi] = w
    chunks = partition_chunks(structure, N)
    need = []
    for i, c in enumerate(chunks):
        remote = c.src_set[owner[c.src_set] != i]
        need.append([remote[owner[remote] == p] for p in range(N)])
    return chunks, owner, need


def run_data_parallel(config: EngineConfig, dataset: Dataset) -> RunResult:
    """Vertex-partitioned training: each worker owns one contiguous chunk of destinations."""
    model = config.model
    graph = dataset.graph
    V = graph.num_vertices
    coeffs, structure = _coefficients(config, graph)
    group = WorkerGroup(config.workers, timeout=config.timeout)
    ranges = group.vertex_ranges(V)
    chunks, owner, need = dp_remote_sets(structure, ranges)
    params0 = init_params(model.layer_dims, config.seed)
    depth = len(params0)

    def body(ctx):
        i = ctx.rank
        lo, hi = ranges[i]
        c = chunks[i]
        params = _copy_params(params0)
        peers = [p for p in range(ctx.size) if p != i]
        epochs = []
        for epoch in range(config.epochs):
            meter = _EpochMeter(ctx, epoch)
            h = dataset.features[lo:hi]
            agg_in, pres = [], []
            for layer, p in enumerate(params):
                width = h.shape[1]
                recv = ctx.alltoall("fetch", {q: h[need[q][i] - lo] for q in peers})
                buf = np.zeros((V, width))
                buf[lo:hi] = h
                for q in peers:
                    buf[need[i][q]] = recv[q]
                agg = np.zeros((V, width))
                scatter_edges(agg, coeffs, buf, slice(c.edge_lo, c.edge_hi))
                ctx.counters["edge_work"] += c.num_edges * width
                a = agg[lo:hi]
                h, pre = gcn_update(a, p, apply_act=layer < depth - 1)
                ctx.counters["vertex_work"] += hi - lo
                agg_in.append(a)
                pres.append(pre)
            nll, g = dense.softmax_xent_sum(h, dataset.labels[lo:hi], dataset.train_mask[lo:hi],
                                            dataset.num_train)
            meter.clock.lap("forward")
            grads = [None] * depth
            for layer in reversed(range(depth)):
                ga, grads[layer] = gcn_update_backward(agg_in[layer], params[layer], pres[layer], g,
                                                       apply_act=layer < depth - 1)
                if layer == 0:
                    break
                width = ga.shape[1]
                gbuf = np.zeros((V, width))
                gbuf[lo:hi] = ga
                acc = np.zeros((V, width))
                scatter_edges(acc, coeffs, gbuf, c.edge_lo + c.src_major, transpose=True)
                ctx.counters["edge_work"] += c.num_edges * width
                recv = ctx.alltoall("push", {q: acc[need[i][q]] for q in peers})
                g = acc[lo:hi].copy()
                for q in peers:
                    g[need[q][i] - lo] += recv[q]
            meter.clock.lap("backward")
            flat = ctx.allreduce_sum(_flatten(grads, None))
            _apply_update(params, _unflatten(flat, params, False)[0], None, config.lr)
            meter.clock.lap("update")
            epochs.append(meter.done(nll, h, np.arange(lo, hi)))
        return dict(epochs=epochs, params=params)

    outputs = group.run(body)
    return _finish(config, dataset, group, outputs, owner, coeffs=coeffs)


def run_naive_tp(config: EngineConfig, dataset: Dataset) -> RunResult:
    """Layer-wise tensor parallelism: gather before each NN update, split after it.

    Input features start vertex-partitioned, so the epoch opens with a split.
    Per epoch this issues 1 + L gathers/splits forward (input split, L
    gathers, L - 1 splits) and 2(L - 1) backward, i.e. 4L - 2 rounds.
    """
    model = config.model
    graph = dataset.graph
    V = graph.num_vertices
    coeffs, structure = _coefficients(config, graph)
    group = WorkerGroup(config.workers, timeout=config.timeout)
    ranges = group.vertex_ranges(V)
    owner = np.empty(V, dtype=np.int64)
    for w, (lo, hi) in enumerate(ranges):
        owner[lo:hi] = w
    rows = np.arange(V)
    dims = model.layer_dims
    col = [group.dim_ranges(d) for d in dims[:-1]]
    params0 = init_params(dims, config.seed)
    depth = len(params0)
    E = structure.num_edges

    def body(ctx):
        lo, hi = ranges[ctx.rank]
        params = _copy_params(params0)
        epochs = []
        for epoch in range(config.epochs):
            meter = _EpochMeter(ctx, epoch)
            h = dataset.features[lo:hi]
            part = ctx.split(h, rows, owner, col[0])
            agg_in, pres = [], []
            for layer, p in enumerate(params):
                agg = aggregate(coeffs, part)
                ctx.counters["edge_work"] += E * part.shape[1]
                _, a = ctx.gather(agg, rows, owner, col[layer])
                h, pre = gcn_update(a, p, apply_act=layer < depth - 1)
                ctx.counters["vertex_work"] += hi - lo
                agg_in.append(a)
                pres.append(pre)
                if layer < depth - 1:
                    part = ctx.split(h, rows, owner, col[layer + 1])
            nll, g = dense.softmax_xent_sum(h, dataset.labels[lo:hi], dataset.train_mask[lo:hi],
                                            dataset.num_train)
            meter.clock.lap("forward")
            grads = [None] * depth
            for layer in reversed(range(depth)):
                ga, grads[layer] = gcn_update_backward(agg_in[layer], params[layer], pres[layer], g,
                                                       apply_act=layer < depth - 1)
                if layer == 0:
                    break
                gpart = ctx.split(ga, rows, owner, col[layer])
                gh = aggregate_backward(coeffs, gpart)
                ctx.counters["edge_work"] += E * gpart.shape[1]
                _, g = ctx.gather(gh, rows, owner, col[layer])
            meter.clock.lap("backward")
            flat = ctx.allreduce_sum(_flatten(grads, None))
            _apply_update(params, _unflatten(flat, params, False)[0], None, config.lr)
            meter.clock.lap("update")
            epochs.append(meter.done(nll, h, np.arange(lo, hi)))
        return dict(epochs=epochs, params=params)

    outputs = group.run(body)
    return _finish(config, dataset, group, outputs, owner, coeffs=coeffs)


def run_decoupled_tp(config: EngineConfig, dataset: Dataset) -> RunResult:
    """Decoupled tensor parallelism over chunks.

    Per epoch: MLP on owned vertices; (GAT) attention precompute shared by
    all workers; chunked split / ``prop_rounds`` aggregations / gather;
    loss on owned rows; the mirrored backward split / aggregations / gather;
    MLP backward; one all-reduce of parameter gradients. That is four
    gather/split rounds per epoch whatever the number of propagation rounds.
    """
    model = config.model
    graph = dataset.graph
    coeffs, structure = _coefficients(config, graph)
    group = WorkerGroup(config.workers, timeout=config.timeout)
    chunks = partition_chunks(structure, config.chunks)
    plan = build_comm_plan(chunks, config.workers)
    rounds = model.prop_rounds
    gamma = model.gamma
    cols = group.dim_ranges(model.layer_dims[-1]) if rounds > 0 else None
    params0 = init_params(model.layer_dims, config.seed, attention=model.is_gat)

    def body(ctx):
        owned = plan.vertices_of(ctx.rank)
        x_own = dataset.features[owned]
        params = _copy_params(params0)
        epochs = []
        for epoch in range(config.epochs):
            meter = _EpochMeter(ctx, epoch)
            lhat, cache = mlp_forward(x_own, params)
            ctx.counters["vertex_work"] += owned.size * len(params)
            op = coeffs
            if model.is_gat:
                op, pre = precompute_gat_attention(ctx, structure, owned, lhat, params[-1].attn)
            if rounds > 0:
                fwd = run_chunked_propagation(ctx, chunks, plan, op, lhat, cols, gamma, rounds,
                                              config.pipelining)
                z = fwd.owned_out
            else:
                z = lhat
            nll, gz = dense.softmax_xent_sum(z, dataset.labels[owned], dataset.train_mask[owned],
                                             dataset.num_train)
            meter.clock.lap("forward")
            if rounds > 0:
                bwd = run_chunked_propagation_backward(ctx, chunks, plan, op, gz, cols, gamma,
                                                       rounds, config.pipelining)
                glhat = bwd.owned_out
            else:
                glhat = gz
            attn_grad = None
            if model.is_gat:
                attn_grad = np.zeros_like(params[-1].attn)
                if rounds == 1:
                    src, dst = structure.edges()
                    partial = np.sum(bwd.in_slice[dst] * fwd.in_slice[src], axis=1)
                    grad_alpha = gamma * ctx.allreduce_sum(partial)
                    g_src, g_dst = attention_grad_from_scores(structure, op.values, pre, grad_alpha)
                    grad_wh, attn_grad = scores_backward(lhat, params[-1].attn,
                                                         g_src[owned], g_dst[owned])
                    glhat = glhat + grad_wh
            grads, _ = mlp_backward(cache, params, glhat)
            meter.clock.lap("backward")
            flat = ctx.allreduce_sum(_flatten(grads, attn_grad))
            grads, attn_grad = _unflatten(flat, params, model.is_gat)
            _apply_update(params, grads, attn_grad, config.lr)
            meter.clock.lap("update")
            epochs.append(meter.done(nll, z, owned))
        return dict(epochs=epochs, params=params)

    outputs = group.run(body)
    return _finish(config, dataset, group, outputs, plan.owner, plan=plan, coeffs=coeffs)


ENGINES = {
    EngineKind.SINGLE: run_single_worker,
    EngineKind.DATA_PARALLEL: run_data_parallel,
    EngineKind.NAIVE_TP: run_naive_tp,
    EngineKind.DECOUPLED_TP: run_decoupled_tp,
}


def train(config: EngineConfig, dataset: Dataset) -> RunResult:
    return ENGINES[config.engine](config, dataset)
