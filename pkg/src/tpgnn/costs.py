"""Closed-form communication and work predictions, and their check against a ledger.

Tensor-parallel collectives move, for each worker, its rows of interest at
every column it does not own: ``sum_i rows_i * (D - width_i)`` scalars per
gather or split. Data parallelism fetches each worker's remote in-neighbors
``R_i`` at full width once per layer: ``sum_i |R_i| * D`` per layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collective import CommLedger
from .dense import even_ranges
from .graph import Graph

MODES = ("naive-tp", "decoupled-tp", "dp")


@dataclass
class AnalyticCost:
    """Predicted per-epoch costs.

    ``rounds`` lists ``(kind, scalars)`` for every collective round the
    engine issues, in order. ``tp_total`` is the tensor-parallel volume for
    the mode (the layer-wise naive protocol when ``mode == "dp"``, for
    contrast), ``dp_total`` is the data-parallel fetch volume.
    """

    mode: str
    rounds: list[tuple[str, int]]
    tp_total: int
    dp_total: int
    edge_work: list[int]

    @property
    def total(self) -> int:
        return sum(s for _, s in self.rounds)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(sorted({k for k, _ in self.rounds}))


def _widths(dim: int, num_workers: int) -> np.ndarray:
    return np.array([hi - lo for lo, hi in even_ranges(dim, num_workers)], dtype=np.int64)


def tp_collective_scalars(rows_per_worker, dim: int) -> int:
    """Scalars moved by one gather or split of ``dim`` columns."""
    rows = np.asarray(rows_per_worker, dtype=np.int64)
    return int(np.sum(rows * (dim - _widths(dim, rows.size))))


def remote_in_neighbors(graph: Graph, partitioning, num_workers: int | None = None) -> list[np.ndarray]:
    """``R_i``: distinct sources of worker ``i``'s in-edges owned by another worker."""
    owner = np.asarray(partitioning, dtype=np.int64)
    src, dst = graph.edges()
    cross = owner[src] != owner[dst]
    if num_workers is None:
        num_workers = int(owner.max()) + 1 if owner.size else 1
    return [np.unique(src[cross & (owner[dst] == i)]) for i in range(num_workers)]


def _layer_dims(dims, depth: int) -> list[int]:
    if np.ndim(dims) == 0:
        return [int(dims)] * depth
    dims = [int(d) for d in dims]
    if len(dims) != depth:
        raise ValueError(f"expected {depth} per-layer widths, got {len(dims)}")
    return dims


def _naive_rounds(rows, widths) -> list[tuple[str, int]]:
    depth = len(widths)
    out = [("split", tp_collective_scalars(rows, widths[0]))]
    for layer in range(depth):
        out.append(("gather", tp_collective_scalars(rows, widths[layer])))
        if layer < depth - 1:
            out.append(("split", tp_collective_scalars(rows, widths[layer + 1])))
    for layer in reversed(range(1, depth)):
        out.append(("split", tp_collective_scalars(rows, widths[layer])))
        out.append(("gather", tp_collective_scalars(rows, widths[layer])))
    return out


def predict_costs(graph: Graph, partitioning, num_workers: int, dims, depth: int,
                  mode: str) -> AnalyticCost:
    """Closed-form per-epoch communication and per-worker edge work.

    ``graph`` is the aggregation structure (with self-loops if the
    normalization adds them) and ``partitioning[v]`` the worker owning
    vertex ``v``.

    ``naive-tp`` and ``dp``: ``depth`` is the number of GNN layers and
    ``dims`` the aggregation width of each layer (an int for all layers).
    ``decoupled-tp``: ``dims`` is the MLP output width and ``depth`` the
    number of propagation rounds; the four rounds are forward split (source
    rows), forward gather (all rows), backward split (all rows) and backward
    gather (source rows).
    """
    if mode not in MODES:
        raise ValueError(f"unknown cost mode {mode!r}; expected one of {MODES}")
    owner = np.asarray(partitioning, dtype=np.int64)
    if owner.size != graph.num_vertices:
        raise ValueError("partitioning must assign every vertex")
    E = graph.num_edges
    rows = np.bincount(owner, minlength=num_workers)
    remote_sizes = np.array([r.size for r in remote_in_neighbors(graph, owner, num_workers)])

    if mode == "decoupled-tp":
        dim = int(dims)
        is_src = np.zeros(graph.num_vertices, dtype=bool)
        is_src[graph.edges()[0]] = True
        src_rows = np.bincount(owner[is_src], minlength=num_workers)
        split = tp_collective_scalars(src_rows, dim)
        gather = tp_collective_scalars(rows, dim)
        rounds = [("split", split), ("gather", gather), ("split", gather), ("gather", split)]
        edge_work = (2 * depth * E * _widths(dim, num_workers)).tolist()
        return AnalyticCost(mode, rounds, sum(s for _, s in rounds),
                            int(remote_sizes.sum()) * dim * depth, edge_work)

    widths = _layer_dims(dims, depth)
    naive = _naive_rounds(rows, widths)
    fetch = [("fetch", int(remote_sizes.sum()) * d) for d in widths]
    dp_total = sum(s for _, s in fetch)
    if mode == "naive-tp":
        per_worker = np.zeros(num_workers, dtype=np.int64)
        for layer, d in enumerate(widths):
            passes = 2 if layer > 0 else 1
            per_worker += passes * E * _widths(d, num_workers)
        return AnalyticCost(mode, naive, sum(s for _, s in naive), dp_total, per_worker.tolist())

    local_edges = np.bincount(owner[graph.edges()[1]], minlength=num_workers)
    push = [("push", int(remote_sizes.sum()) * d) for d in reversed(widths[1:])]
    passes = widths[0] + 2 * sum(widths[1:])
    return AnalyticCost(mode, fetch + push, sum(s for _, s in naive), dp_total,
                        (local_edges * passes).tolist())


def imbalance(values) -> float:
    """``max / min`` over workers; 1.0 when all are zero, ``inf`` when only the minimum is."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == 0:
        return 1.0
    return float("inf") if lo == 0 else float(hi / lo)


@dataclass
class CostComparison:
    passed: bool
    mismatches: list[dict] = field(default_factory=list)
    measured_total: int = 0
    predicted_total: int = 0
    ratios: dict[str, float] = field(default_factory=dict)

    @property
    def delta(self) -> int:
        return self.measured_total - self.predicted_total

    def summary(self) -> str:
        head = "PASS" if self.passed else "FAIL"
        lines = [f"{head}: measured {self.measured_total}, predicted {self.predicted_total}, "
                 f"delta {self.delta}"]
        for m in self.mismatches:
            lines.append(f"  round {m['index']} ({m['kind']}): expected {m['expected']}, "
                         f"actual {m['actual']}")
        for name, r in self.ratios.items():
            lines.append(f"  {name} max/min = {r:.4f}")
        return "\n".join(lines)


def compare_measured_vs_predicted(ledger: CommLedger, analytic: AnalyticCost, *, tag: str | None = "0",
                                  edge_work=None, vertex_work=None) -> CostComparison:
    """Check one epoch of ``ledger`` against ``analytic`` round by round.

    Rounds are matched in issue order over the kinds ``analytic`` predicts.
    Imbalance ratios cover per-worker received scalars and, when given,
    per-worker edge and vertex work.
    """
    measured = list(ledger.round_totals(analytic.kinds, tag).values())
    mismatches = []
    for i in range(max(len(measured), len(analytic.rounds))):
        exp_kind, expected = analytic.rounds[i] if i < len(analytic.rounds) else ("-", None)
        act_kind, sent, received = measured[i] if i < len(measured) else ("-", None, None)
        if act_kind != exp_kind or expected != received or sent != received:
            mismatches.append(dict(index=i, kind=f"{exp_kind}/{act_kind}",
                                   expected=expected, actual=received))
    ratios = {"comm": imbalance(ledger.per_worker(analytic.kinds, tag, "received"))}
    if edge_work is not None:
        ratios["edge_work"] = imbalance(edge_work)
    if vertex_work is not None:
        ratios["vertex_work"] = imbalance(vertex_work)
    measured_total = sum(r for _, _, r in measured)
    return CostComparison(not mismatches, mismatches, measured_total, analytic.total, ratios)
