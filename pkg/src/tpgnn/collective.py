"""In-process worker group with message-passing collectives.

Each worker is a thread. Every ordered pair of workers shares a bounded FIFO
queue; a collective posts one message to every peer and later collects one
message from every peer. All merges and reductions run in ascending worker
id (or key) order, so results never depend on thread interleaving.

Every collective call appends a record to the calling worker's ledger shard:
the operation kind, its logical round, and the number of scalars sent and
received. Chunk-level calls that belong to one logical collective share a
round id (see :meth:`Worker.new_round`).
"""
from __future__ import annotations

import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dense import even_ranges
from .errors import CollectiveError, ProtocolError

DEFAULT_TIMEOUT = 30.0
_POLL = 0.02


@dataclass
class LedgerRecord:
    worker: int
    seq: int
    kind: str
    round: int
    sent: int = 0
    received: int = 0
    tag: str = ""
    chunk: int | None = None


@dataclass
class CommLedger:
    """Merged, read-only view of all workers' ledger shards."""

    num_workers: int
    records: list[LedgerRecord] = field(default_factory=list)

    def select(self, kinds=None, tag=None, worker=None) -> list[LedgerRecord]:
        if isinstance(kinds, str):
            kinds = (kinds,)
        return [
            r for r in self.records
            if (kinds is None or r.kind in kinds)
            and (tag is None or r.tag == tag)
            and (worker is None or r.worker == worker)
        ]

    def rounds(self, kinds=None, tag=None) -> list[int]:
        return sorted({r.round for r in self.select(kinds, tag)})

    def num_rounds(self, kinds=None, tag=None) -> int:
        return len(self.rounds(kinds, tag))

    def total_sent(self, kinds=None, tag=None) -> int:
        return sum(r.sent for r in self.select(kinds, tag))

    def total_received(self, kinds=None, tag=None) -> int:
        return sum(r.received for r in self.select(kinds, tag))

    def per_worker(self, kinds=None, tag=None, field_name="received") -> list[int]:
        out = [0] * self.num_workers
        for r in self.select(kinds, tag):
            out[r.worker] += getattr(r, field_name)
        return out

    def round_totals(self, kinds=None, tag=None) -> dict[int, tuple[str, int, int]]:
        """``round -> (kind, scalars sent, scalars received)`` summed over workers."""
        out: dict[int, list] = {}
        for r in self.select(kinds, tag):
            entry = out.setdefault(r.round, [r.kind, 0, 0])
            entry[1] += r.sent
            entry[2] += r.received
        return {k: tuple(v) for k, v in sorted(out.items())}

    def conserved(self) -> bool:
        return all(sent == recv for _, sent, recv in self.round_totals().values())

    def to_dict(self) -> dict:
        return {"num_workers": self.num_workers, "records": [asdict(r) for r in self.records]}

    def __eq__(self, other):
        return isinstance(other, CommLedger) and self.to_dict() == other.to_dict()


@dataclass
class _Message:
    seq: int
    kind: str
    meta: object
    payload: np.ndarray | None


class Request:
    """Handle to a posted collective; :meth:`wait` completes it."""

    def __init__(self, worker: "Worker", seq: int, kind: str, record: LedgerRecord,
                 finish: Callable[[dict], object], check: Callable[[int, object], None] | None):
        self._worker = worker
        self.seq = seq
        self.kind = kind
        self._record = record
        self._finish = finish
        self._check = check
        self._done = False
        self._result = None

    def wait(self):
        if self._done:
            return self._result
        w = self._worker
        received = {}
        deadline = time.monotonic() + w.group.timeout
        for peer in range(w.size):
            if peer == w.rank:
                continue
            msg = w._recv(peer, self.seq, deadline)
            if msg.kind != self.kind:
                raise CollectiveError(
                    f"worker {w.rank} called {self.kind} (seq {self.seq}) "
                    f"but worker {peer} called {msg.kind}"
                )
            if self._check is not None:
                self._check(peer, msg.meta)
            received[peer] = msg.payload
            if msg.payload is not None:
                self._record.received += int(msg.payload.size)
        self._result = self._finish(received)
        self._done = True
        return self._result


class Worker:
    """Execution context of one worker inside :meth:`WorkerGroup.run`."""

    def __init__(self, group: "WorkerGroup", rank: int):
        self.group = group
        self.rank = rank
        self.size = group.num_workers
        self.tag = ""
        self._stash: dict[tuple[int, int], _Message] = {}
        self._consumed: list[set[int]] = [set() for _ in range(self.size)]
        self.ledger: list[LedgerRecord] = group._shards[rank]
        self.trace: list[dict] = group._traces[rank]
        self.counters: dict[str, int] = group._counters[rank]

    # --- plumbing ---------------------------------------------------------

    def new_round(self) -> int:
        r = self.group._rounds[self.rank]
        self.group._rounds[self.rank] = r + 1
        return r

    def _send(self, peer: int, msg: _Message):
        q = self.group._queues[self.rank][peer]
        deadline = time.monotonic() + self.group.timeout
        while True:
            self.group._check_abort(self.rank)
            try:
                q.put(msg, timeout=_POLL)
                return
            except queue.Full:
                if time.monotonic() > deadline:
                    raise ProtocolError(f"worker {self.rank}: send to {peer} timed out") from None

    def _recv(self, peer: int, seq: int, deadline: float) -> _Message:
        key = (peer, seq)
        self._consumed[peer].add(seq)
        if key in self._stash:
            return self._stash.pop(key)
        q = self.group._queues[peer][self.rank]
        while True:
            self.group._check_abort(self.rank)
            try:
                msg = q.get(timeout=_POLL)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise ProtocolError(
                        f"worker {self.rank}: timed out waiting for worker {peer} (collective #{seq})"
                    ) from None
                continue
            if msg.seq == seq:
                return msg
            if (peer, msg.seq) in self._stash or msg.seq in self._consumed[peer]:
                raise ProtocolError(f"worker {self.rank}: duplicate message #{msg.seq} from {peer}")
            self._stash[(peer, msg.seq)] = msg

    def post(self, kind: str, payloads: dict, *, round: int | None = None, chunk: int | None = None,
             meta: dict | None = None, finish=None, check=None) -> Request:
        """Send ``payloads[peer]`` to every peer and return a pending request.

        ``meta[peer]`` travels with the payload for the receiver's ``check``.
        """
        seq = self.group._seqs[self.rank]
        self.group._seqs[self.rank] = seq + 1
        if round is None:
            round = self.new_round()
        record = LedgerRecord(self.rank, seq, kind, round, tag=self.tag, chunk=chunk)
        self.ledger.append(record)
        for peer in range(self.size):
            if peer == self.rank:
                continue
            payload = payloads.get(peer)
            if payload is not None:
                payload = np.ascontiguousarray(payload)
                record.sent += int(payload.size)
            self._send(peer, _Message(seq, kind, (meta or {}).get(peer), payload))
        return Request(self, seq, kind, record, finish or (lambda r: r), check)

    def record_stage(self, **event):
        self.trace.append(dict(worker=self.rank, **event))

    # --- collectives ------------------------------------------------------

    def igather(self, local, row_ids, owners, col_ranges, *, round=None, chunk=None) -> Request:
        """Post a gather of column slices into full-width rows at their owners.

        ``local`` holds this worker's columns ``col_ranges[rank]`` for the rows
        ``row_ids``; ``owners[k]`` is the worker that receives row ``row_ids[k]``.
        The request yields ``(owned_row_ids, rows)`` with column blocks placed in
        ascending worker order.
        """
        local = np.asarray(local, dtype=np.float64)
        row_ids = np.asarray(row_ids, dtype=np.int64)
        owners = np.asarray(owners, dtype=np.int64)
        lo, hi = col_ranges[self.rank]
        if local.shape != (row_ids.size, hi - lo):
            raise CollectiveError(
                f"worker {self.rank}: gather slice shape {local.shape}, "
                f"expected {(row_ids.size, hi - lo)}"
            )
        width = col_ranges[-1][1]
        mine = owners == self.rank
        payloads, meta = {}, {}
        for peer in range(self.size):
            if peer != self.rank:
                sel = owners == peer
                payloads[peer] = local[sel]
                meta[peer] = (int(sel.sum()), width)
        n_mine = int(mine.sum())

        def check(peer, m):
            if m != (n_mine, width):
                raise CollectiveError(
                    f"gather shape disagreement: worker {peer} sent {m}, "
                    f"worker {self.rank} expected {(n_mine, width)}"
                )

        def finish(received):
            out = np.empty((n_mine, width))
            for peer, (plo, phi) in enumerate(col_ranges):
                block = local[mine] if peer == self.rank else received[peer]
                if block.shape != (n_mine, phi - plo):
                    raise CollectiveError(f"gather: block from worker {peer} has shape {block.shape}")
                out[:, plo:phi] = block
            return row_ids[mine], out

        return self.post("gather", payloads, round=round, chunk=chunk, meta=meta,
                         finish=finish, check=check)

    def gather(self, local, row_ids, owners, col_ranges, **kw):
        return self.igather(local, row_ids, owners, col_ranges, **kw).wait()

    def isplit(self, full_rows, row_ids, owners, col_ranges, *, round=None, chunk=None) -> Request:
        """Post the inverse of :meth:`igather`.

        ``full_rows`` are this worker's rows (those with ``owners == rank``, in
        ``row_ids`` order) at full width. The request yields this worker's
        column slice for every row in ``row_ids``.
        """
        full_rows = np.asarray(full_rows, dtype=np.float64)
        row_ids = np.asarray(row_ids, dtype=np.int64)
        owners = np.asarray(owners, dtype=np.int64)
        mine = owners == self.rank
        width = col_ranges[-1][1]
        if full_rows.shape != (int(mine.sum()), width):
            raise CollectiveError(
                f"worker {self.rank}: split input shape {full_rows.shape}, "
                f"expected {(int(mine.sum()), width)}"
            )
        lo, hi = col_ranges[self.rank]
        payloads, meta = {}, {}
        for peer, (plo, phi) in enumerate(col_ranges):
            if peer != self.rank:
                payloads[peer] = full_rows[:, plo:phi]
                meta[peer] = (int(mine.sum()), width)

        def check(peer, m):
            expect = (int((owners == peer).sum()), width)
            if m != expect:
                raise CollectiveError(
                    f"split shape disagreement: worker {peer} sent {m}, worker {self.rank} expected {expect}"
                )

        def finish(received):
            out = np.empty((row_ids.size, hi - lo))
            out[mine] = full_rows[:, lo:hi]
            for peer, block in received.items():
                out[owners == peer] = block
            return out

        return self.post("split", payloads, round=round, chunk=chunk, meta=meta,
                         finish=finish, check=check)

    def split(self, full_rows, row_ids, owners, col_ranges, **kw):
        return self.isplit(full_rows, row_ids, owners, col_ranges, **kw).wait()

    def all_share(self, keys, values, *, total_keys: int | None = None, round=None):
        """Merge disjoint keyed arrays from all workers; every worker gets the same result.

        Returns ``(keys, values)`` sorted by key. ``values`` may have trailing
        dimensions (one row per key).
        """
        keys = np.asarray(keys, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if values.shape[:1] != keys.shape:
            raise CollectiveError("all_share: one value row per key required")
        trailing = values.shape[1:]
        payloads = {p: values for p in range(self.size) if p != self.rank}
        meta = {p: (keys.copy(), trailing) for p in range(self.size) if p != self.rank}
        received_keys: dict[int, np.ndarray] = {}

        def check(peer, m):
            peer_keys, peer_trailing = m
            if peer_trailing != trailing:
                raise CollectiveError(f"all_share: value shape mismatch with worker {peer}")
            received_keys[peer] = peer_keys

        def finish(received):
            all_keys = [keys]
            all_vals = [values]
            for peer in sorted(received):
                all_keys.append(received_keys[peer])
                all_vals.append(received[peer].reshape((-1,) + trailing))
            k = np.concatenate(all_keys)
            v = np.concatenate(all_vals)
            order = np.argsort(k, kind="stable")
            k, v = k[order], v[order]
            if np.any(k[1:] == k[:-1]):
                raise ProtocolError("all_share: overlapping keys across workers")
            if total_keys is not None and k.size != total_keys:
                raise ProtocolError(f"all_share: got {k.size} keys, expected {total_keys}")
            return k, v

        return self.post("all_share", payloads, round=round, meta=meta,
                         finish=finish, check=check).wait()

    def allreduce_sum(self, value, *, round=None):
        """Sum equally-shaped arrays over workers in ascending worker order."""
        value = np.asarray(value, dtype=np.float64)
        payloads = {p: value for p in range(self.size) if p != self.rank}
        meta = {p: value.shape for p in payloads}

        def check(peer, shape):
            if shape != value.shape:
                raise CollectiveError(
                    f"allreduce shape mismatch: worker {peer} has {shape}, worker {self.rank} has {value.shape}"
                )

        def finish(received):
            parts = [value if p == self.rank else received[p].reshape(value.shape)
                     for p in range(self.size)]
            out = parts[0].copy()
            for part in parts[1:]:
                out += part
            return out

        return self.post("allreduce", payloads, round=round, meta=meta,
                         finish=finish, check=check).wait()

    def alltoall(self, kind: str, payloads: dict, *, round=None, chunk=None) -> dict:
        """Point-to-point exchange; returns ``{peer: array}`` from every peer."""
        return self.post(kind, payloads, round=round, chunk=chunk).wait()

    def barrier(self):
        self.post("barrier", {}).wait()


class WorkerGroup:
    """``num_workers`` workers connected by bounded FIFO queues."""

    def __init__(self, num_workers: int, timeout: float = DEFAULT_TIMEOUT, queue_size: int = 64):
        if num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        self.num_workers = num_workers
        self.timeout = timeout
        self._queues = [[queue.Queue(maxsize=queue_size) for _ in range(num_workers)]
                        for _ in range(num_workers)]
        self._shards: list[list[LedgerRecord]] = [[] for _ in range(num_workers)]
        self._traces: list[list[dict]] = [[] for _ in range(num_workers)]
        self._counters: list[dict[str, int]] = [
            {"edge_work": 0, "vertex_work": 0} for _ in range(num_workers)
        ]
        # Counters persist across run() calls so rounds stay unique in the ledger.
        self._seqs = [0] * num_workers
        self._rounds = [0] * num_workers
        self._abort = threading.Event()
        self._failed: int | None = None
        self._lock = threading.Lock()

    def vertex_ranges(self, num_vertices: int) -> list[tuple[int, int]]:
        return even_ranges(num_vertices, self.num_workers)

    def dim_ranges(self, dim: int) -> list[tuple[int, int]]:
        if dim < self.num_workers:
            raise CollectiveError(f"cannot split {dim} columns across {self.num_workers} workers")
        return even_ranges(dim, self.num_workers)

    def _check_abort(self, rank: int):
        if self._abort.is_set():
            raise ProtocolError(f"worker {rank}: round aborted after worker {self._failed} failed")

    def run(self, fn: Callable, *args, **kwargs) -> list:
        """Run ``fn(worker, *args, **kwargs)`` on every worker; return results by rank.

        If any worker raises, the others are aborted and the first original
        error (lowest rank among root causes) is re-raised.
        """
        if self._abort.is_set():
            raise ProtocolError("worker group was aborted by an earlier failure")
        results: list = [None] * self.num_workers
        errors: dict[int, BaseException] = {}

        def body(rank):
            try:
                results[rank] = fn(Worker(self, rank), *args, **kwargs)
            except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
                with self._lock:
                    errors[rank] = exc
                    if not self._abort.is_set():
                        self._failed = rank
                        self._abort.set()

        if self.num_workers == 1:
            body(0)
        else:
            threads = [threading.Thread(target=body, args=(r,), daemon=True)
                       for r in range(self.num_workers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if errors:
            root = errors.get(self._failed)
            raise root if root is not None else errors[min(errors)]
        return results

    def ledger_snapshot(self) -> CommLedger:
        records = [LedgerRecord(**asdict(r)) for shard in self._shards for r in shard]
        records.sort(key=lambda r: (r.round, r.worker, r.seq))
        return CommLedger(self.num_workers, records)

    def counters(self) -> list[dict[str, int]]:
        return [dict(c) for c in self._counters]

    def trace(self) -> list[dict]:
        events = [dict(e) for shard in self._traces for e in shard]
        events.sort(key=lambda e: (e["worker"], e["t0"]))
        return events
