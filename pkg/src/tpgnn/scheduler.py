"""Chunk-level scheduling of split / aggregate / gather stages on one worker.

Every worker walks the same chunk list in ascending order. In the forward
direction the split of chunk ``j`` delivers this worker's column slice of
the chunk's source rows; rows already delivered for an earlier chunk are
not sent again. After the last propagation round, each chunk's destination
rows are gathered back at full width on their owners. The backward
direction splits destination-row gradients and gathers source-row
gradients once they are complete.

With pipelining on, communication for the next chunk is posted before the
current chunk is aggregated and completed afterwards (one chunk in flight).
Arithmetic is identical either way.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .collective import Worker, WorkerGroup
from .graph import Chunk, EdgeCoefficients, partition_chunks
from .layers import scatter_edges


@dataclass
class ChunkCommPlan:
    """Who communicates which vertex, chunk by chunk.

    ``chunk_vertices[j]`` are the source vertices of chunk ``j`` that no
    earlier chunk already communicated, and ``chunk_owners[j]`` the worker
    responsible for each. ``owner[v]`` covers every vertex: vertices that are
    nobody's source are assigned after the last chunk. ``last_use[j]`` lists
    the source vertices whose final occurrence is chunk ``j``; their backward
    gradients are complete once that chunk is done.
    """

    num_workers: int
    chunk_vertices: list[np.ndarray]
    chunk_owners: list[np.ndarray]
    owner: np.ndarray
    last_use: list[np.ndarray]

    def assignments(self, j: int) -> list[tuple[int, int]]:
        return list(zip(self.chunk_vertices[j].tolist(), self.chunk_owners[j].tolist()))

    def vertices_of(self, worker: int) -> np.ndarray:
        return np.flatnonzero(self.owner == worker)

    def counts(self) -> list[int]:
        return np.bincount(self.owner, minlength=self.num_workers).tolist()

    @property
    def src_union(self) -> np.ndarray:
        return np.sort(np.concatenate(self.chunk_vertices)) if self.chunk_vertices else np.zeros(0, int)


def build_comm_plan(chunks: list[Chunk], num_workers: int) -> ChunkCommPlan:
    """Deduplicated, round-robin communication assignment over ``chunks``.

    The round-robin pointer carries over from one chunk to the next, so
    per-worker totals never differ by more than one vertex.
    """
    V = chunks[0].graph.num_vertices
    seen = np.zeros(V, dtype=bool)
    last = np.full(V, -1, dtype=np.int64)
    owner = np.full(V, -1, dtype=np.int64)
    cursor = 0
    verts, owners = [], []
    for chunk in chunks:
        fresh = chunk.src_set[~seen[chunk.src_set]]
        who = (cursor + np.arange(fresh.size)) % num_workers
        cursor += fresh.size
        seen[fresh] = True
        owner[fresh] = who
        last[chunk.src_set] = chunk.chunk_id
        verts.append(fresh)
        owners.append(who)
    rest = np.flatnonzero(owner < 0)
    owner[rest] = (cursor + np.arange(rest.size)) % num_workers
    last_use = [np.flatnonzero(last == c.chunk_id) for c in chunks]
    return ChunkCommPlan(num_workers, verts, owners, owner, last_use)


@dataclass
class PropagationResult:
    """Outcome of a chunked pass on one worker.

    ``out_slice``: this worker's columns of the output for every vertex.
    ``owned_out``: gathered full-width output rows of the owned vertices.
    ``in_slice``: this worker's columns of the input rows it received.
    """

    out_slice: np.ndarray
    owned_out: np.ndarray
    in_slice: np.ndarray


class _Stage:
    def __init__(self, ctx: Worker, **fields):
        self.ctx = ctx
        self.fields = fields
        self.t0 = time.perf_counter_ns()

    def end(self):
        self.ctx.record_stage(t0=self.t0, t1=time.perf_counter_ns(), **self.fields)


def _owned_lookup(plan: ChunkCommPlan, rank: int):
    owned = plan.vertices_of(rank)
    pos = np.full(plan.owner.size, -1, dtype=np.int64)
    pos[owned] = np.arange(owned.size)
    return owned, pos


def run_chunked_propagation(ctx: Worker, chunks, plan: ChunkCommPlan, coeffs: EdgeCoefficients,
                            owned_rows, col_ranges, gamma: float, rounds: int,
                            pipelining: bool = False):
    """Forward propagation ``(gamma * A)^rounds`` on this worker's column slice.

    ``owned_rows`` are full-width rows for ``plan.vertices_of(rank)`` in
    ascending id order.
    """
    owned, pos = _owned_lookup(plan, ctx.rank)
    owned_rows = np.asarray(owned_rows, dtype=np.float64)
    V = plan.owner.size
    lo, hi = col_ranges[ctx.rank]
    width = hi - lo
    if rounds == 0:
        raise ValueError("chunked propagation needs at least one round")
    r_split = ctx.new_round()
    r_gather = ctx.new_round()
    cur = np.zeros((V, width))
    z0_slice = cur
    owned_out = np.empty_like(owned_rows)

    def post_split(j):
        ids = plan.chunk_vertices[j]
        who = plan.chunk_owners[j]
        stage = _Stage(ctx, stage="CommSplit", direction="forward", chunk=j, layer=0,
                       rows=int(chunks[j].src_set.size))
        req = ctx.isplit(owned_rows[pos[ids[who == ctx.rank]]], ids, who, col_ranges,
                         round=r_split, chunk=j)
        return ids, req, stage

    def finish_split(pending):
        ids, req, stage = pending
        cur[ids] = req.wait()
        stage.end()

    def post_gather(j, out):
        c = chunks[j]
        ids = np.arange(c.dst_lo, c.dst_hi)
        stage = _Stage(ctx, stage="CommGather", direction="forward", chunk=j, layer=rounds - 1,
                       rows=int(ids.size))
        req = ctx.igather(out[c.dst_lo:c.dst_hi], ids, plan.owner[ids], col_ranges,
                          round=r_gather, chunk=j)
        return req, stage

    def finish_gather(pending):
        req, stage = pending
        got_ids, rows = req.wait()
        owned_out[pos[got_ids]] = rows
        stage.end()

    split_next = None
    gather_prev = None
    for layer in range(rounds):
        out = np.zeros((V, width))
        for j, c in enumerate(chunks):
            if layer == 0:
                pending = split_next or post_split(j)
                finish_split(pending)
                split_next = post_split(j + 1) if pipelining and j + 1 < len(chunks) else None
            stage = _Stage(ctx, stage="Aggregate", direction="forward", chunk=j, layer=layer,
                           rows=int(c.src_set.size))
            scatter_edges(out, coeffs, cur, slice(c.edge_lo, c.edge_hi))
            out[c.dst_lo:c.dst_hi] *= gamma
            ctx.counters["edge_work"] += c.num_edges * width
            stage.end()
            if layer == rounds - 1:
                if gather_prev is not None:
                    finish_gather(gather_prev)
                    gather_prev = None
                pending = post_gather(j, out)
                if pipelining:
                    gather_prev = pending
                else:
                    finish_gather(pending)
        cur = out
    if gather_prev is not None:
        finish_gather(gather_prev)
    return PropagationResult(cur, owned_out, z0_slice)


def run_chunked_propagation_backward(ctx: Worker, chunks, plan: ChunkCommPlan,
                                     coeffs: EdgeCoefficients, owned_grad, col_ranges,
                                     gamma: float, rounds: int, pipelining: bool = False):
    """Adjoint of :func:`run_chunked_propagation`.

    ``owned_grad`` holds full-width gradients for this worker's owned rows.
    Source-row gradients are accumulated chunk by chunk in ascending order
    and gathered once their last contributing chunk is done. The
    ``owned_out`` of the returned :class:`PropagationResult` is the
    full-width gradient for the owned rows (zero for vertices that are no
    chunk's source).
    """
    owned, pos = _owned_lookup(plan, ctx.rank)
    owned_grad = np.asarray(owned_grad, dtype=np.float64)
    V = plan.owner.size
    lo, hi = col_ranges[ctx.rank]
    width = hi - lo
    if rounds == 0:
        raise ValueError("chunked propagation needs at least one round")
    r_split = ctx.new_round()
    r_gather = ctx.new_round()
    cur = np.zeros((V, width))
    grad_slice = cur
    result = np.zeros_like(owned_grad)

    def post_split(j):
        c = chunks[j]
        ids = np.arange(c.dst_lo, c.dst_hi)
        who = plan.owner[ids]
        stage = _Stage(ctx, stage="CommSplit", direction="backward", chunk=j, layer=rounds - 1,
                       rows=int(ids.size))
        req = ctx.isplit(owned_grad[pos[ids[who == ctx.rank]]], ids, who, col_ranges,
                         round=r_split, chunk=j)
        return ids, req, stage

    def finish_split(pending):
        ids, req, stage = pending
        cur[ids] = req.wait()
        stage.end()

    def post_gather(j, acc):
        ids = plan.last_use[j]
        stage = _Stage(ctx, stage="CommGather", direction="backward", chunk=j, layer=0,
                       rows=int(ids.size))
        req = ctx.igather(gamma * acc[ids], ids, plan.owner[ids], col_ranges,
                          round=r_gather, chunk=j)
        return req, stage

    def finish_gather(pending):
        req, stage = pending
        got_ids, rows = req.wait()
        result[pos[got_ids]] = rows
        stage.end()

    split_next = None
    gather_prev = None
    for layer in reversed(range(rounds)):
        acc = np.zeros((V, width))
        for j, c in enumerate(chunks):
            if layer == rounds - 1:
                pending = split_next or post_split(j)
                finish_split(pending)
                split_next = post_split(j + 1) if pipelining and j + 1 < len(chunks) else None
            stage = _Stage(ctx, stage="Aggregate", direction="backward", chunk=j, layer=layer,
                           rows=int(c.dst_hi - c.dst_lo))
            scatter_edges(acc, coeffs, cur, c.edge_lo + c.src_major, transpose=True)
            ctx.counters["edge_work"] += c.num_edges * width
            stage.end()
            if layer == 0:
                if gather_prev is not None:
                    finish_gather(gather_prev)
                    gather_prev = None
                pending = post_gather(j, acc)
                if pipelining:
                    gather_prev = pending
                else:
                    finish_gather(pending)
        cur = gamma * acc
    if gather_prev is not None:
        finish_gather(gather_prev)
    return PropagationResult(cur, result, grad_slice)


def chunked_propagate(z0, coeffs: EdgeCoefficients, gamma: float, rounds: int, *,
                      num_workers: int = 1, num_chunks: int = 1, pipelining: bool = False,
                      group: WorkerGroup | None = None):
    """Run chunked forward propagation of a full matrix across a worker group.

    Convenience driver used for checks and benchmarks: the owners' rows of
    ``z0`` are handed to each worker, and the gathered result is reassembled.
    Returns ``(z_out, plan, group)``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    group = group or WorkerGroup(num_workers)
    chunks = partition_chunks(coeffs.structure, num_chunks)
    plan = build_comm_plan(chunks, group.num_workers)
    col_ranges = group.dim_ranges(z0.shape[1])

    def body(ctx):
        owned = plan.vertices_of(ctx.rank)
        res = run_chunked_propagation(ctx, chunks, plan, coeffs, z0[owned], col_ranges,
                                      gamma, rounds, pipelining)
        return owned, res.owned_out

    out = np.empty_like(z0)
    for owned, rows in group.run(body):
        out[owned] = rows
    return out, plan, group


# --- traces ---------------------------------------------------------------


def residency_intervals(trace: list[dict]):
    """``(worker, t_begin, t_end, rows)`` for every aggregate stage's source rows.

    A chunk's source rows become resident when its split is posted (first
    round of a direction) or when its aggregate starts, and are released
    when the aggregate ends.
    """
    splits = {
        (e["worker"], e["direction"], e["chunk"]): e["t0"]
        for e in trace if e["stage"] == "CommSplit"
    }
    first_layer = {}
    for e in trace:
        if e["stage"] == "Aggregate":
            key = (e["worker"], e["direction"])
            pick = min if e["direction"] == "forward" else max
            first_layer[key] = pick(first_layer.get(key, e["layer"]), e["layer"])
    out = []
    for e in trace:
        if e["stage"] != "Aggregate":
            continue
        start = e["t0"]
        if e["layer"] == first_layer[(e["worker"], e["direction"])]:
            start = min(start, splits.get((e["worker"], e["direction"], e["chunk"]), start))
        out.append((e["worker"], start, e["t1"], e["rows"]))
    return out


def peak_resident_rows(trace: list[dict]) -> int:
    """Largest number of source rows resident at once on any single worker."""
    peak = 0
    by_worker: dict[int, list] = {}
    for w, t0, t1, rows in residency_intervals(trace):
        by_worker.setdefault(w, []).append((t0, 1, rows))
        by_worker.setdefault(w, []).append((t1, 0, rows))
    for events in by_worker.values():
        events.sort()  # releases sort before acquisitions at equal timestamps
        live = 0
        for _, kind, rows in events:
            live += rows if kind else -rows
            peak = max(peak, live)
    return peak


def overlap_intervals(trace: list[dict], direction: str = "forward"):
    """Pairs ``(worker, j)`` where CommSplit(j+1) overlaps Aggregate(j) in time."""
    split = {(e["worker"], e["chunk"]): e for e in trace
             if e["stage"] == "CommSplit" and e["direction"] == direction}
    found = []
    for e in trace:
        if e["stage"] != "Aggregate" or e["direction"] != direction:
            continue
        nxt = split.get((e["worker"], e["chunk"] + 1))
        if nxt is not None and nxt["t0"] < e["t1"] and e["t0"] < nxt["t1"]:
            found.append((e["worker"], e["chunk"]))
    return sorted(set(found))


def write_trace(trace: list[dict], path) -> None:
    with Path(path).open("w") as fh:
        for event in trace:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
