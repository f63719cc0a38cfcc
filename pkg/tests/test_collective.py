import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpgnn.collective import WorkerGroup
from tpgnn.errors import CollectiveError, ProtocolError


def round_trip(num_rows, dim, workers, seed):
    """Split full rows into column slices and gather them back, on every worker."""
    rng = np.random.default_rng(seed)
    full = rng.normal(size=(num_rows, dim))
    owners = rng.integers(0, workers, num_rows)
    rows = np.arange(num_rows)
    group = WorkerGroup(workers)
    cols = group.dim_ranges(dim)

    def body(ctx):
        mine = owners == ctx.rank
        part = ctx.split(full[mine], rows, owners, cols)
        got_ids, back = ctx.gather(part, rows, owners, cols)
        return part, got_ids, back

    return full, owners, cols, group, group.run(body)


@settings(max_examples=30, deadline=None)
@given(num_rows=st.integers(0, 20), dim=st.integers(4, 9), workers=st.integers(1, 4),
       seed=st.integers(0, 10_000))
def test_split_then_gather_is_identity(num_rows, dim, workers, seed):
    full, owners, cols, group, results = round_trip(num_rows, dim, workers, seed)
    for rank, (part, got_ids, back) in enumerate(results):
        lo, hi = cols[rank]
        assert np.array_equal(part, full[:, lo:hi])
        assert np.array_equal(got_ids, np.flatnonzero(owners == rank))
        assert np.array_equal(back, full[owners == rank])
    assert group.ledger_snapshot().conserved()


def test_ledger_counts_each_collective():
    # 6 rows, 4 columns split 2/2 over 2 workers; worker 0 owns rows 0-2
    full, owners, cols, group, _ = round_trip(6, 4, 2, seed=0)
    ledger = group.ledger_snapshot()
    assert ledger.num_rounds() == 2
    per_round = ledger.round_totals()
    rows0 = int((owners == 0).sum())
    rows1 = 6 - rows0
    for kind, sent, received in per_round.values():
        assert sent == received == 2 * rows0 + 2 * rows1
    assert ledger.per_worker("split", field_name="sent") == [2 * rows0, 2 * rows1]


def test_allreduce_is_deterministic_and_ordered(rng):
    values = [rng.normal(size=5) * 10.0 ** k for k in range(4)]
    group = WorkerGroup(4)
    results = group.run(lambda ctx: ctx.allreduce_sum(values[ctx.rank]))
    expect = values[0].copy()
    for v in values[1:]:
        expect += v
    for r in results:
        assert np.array_equal(r, expect)


def test_all_share_merges_by_key():
    group = WorkerGroup(3)

    def body(ctx):
        keys = np.arange(ctx.rank, 9, 3)
        return ctx.all_share(keys, keys * 1.5, total_keys=9)

    for keys, vals in group.run(body):
        assert np.array_equal(keys, np.arange(9))
        assert np.array_equal(vals, np.arange(9) * 1.5)


@pytest.mark.parametrize("keys, total", [([[0, 1], [1, 2]], None), ([[0], [1]], 3)])
def test_all_share_rejects_bad_key_sets(keys, total):
    group = WorkerGroup(2)
    with pytest.raises(ProtocolError):
        group.run(lambda ctx: ctx.all_share(keys[ctx.rank], np.zeros(len(keys[ctx.rank])),
                                            total_keys=total))


def test_mismatched_collectives_are_detected():
    group = WorkerGroup(2, timeout=5)

    def body(ctx):
        if ctx.rank == 0:
            return ctx.allreduce_sum(np.zeros(2))
        return ctx.barrier()

    with pytest.raises(CollectiveError):
        group.run(body)


def test_allreduce_shape_mismatch():
    group = WorkerGroup(2, timeout=5)
    with pytest.raises(CollectiveError, match="shape"):
        group.run(lambda ctx: ctx.allreduce_sum(np.zeros(2 + ctx.rank)))


def test_missing_peer_times_out():
    group = WorkerGroup(2, timeout=0.3)

    def body(ctx):
        if ctx.rank == 0:
            ctx.barrier()

    with pytest.raises(ProtocolError):
        group.run(body)


def test_worker_error_aborts_the_group():
    group = WorkerGroup(3, timeout=10)

    def body(ctx):
        if ctx.rank == 1:
            raise KeyError("boom")
        ctx.barrier()

    with pytest.raises(KeyError, match="boom"):
        group.run(body)
    with pytest.raises(ProtocolError):
        group.run(lambda ctx: None)


def test_nonblocking_requests_complete_in_any_wait_order(rng):
    full = rng.normal(size=(4, 6))
    owners = np.array([0, 1, 0, 1])
    group = WorkerGroup(2)
    cols = group.dim_ranges(6)

    def body(ctx):
        mine = owners == ctx.rank
        first = ctx.isplit(full[mine], np.arange(4), owners, cols)
        second = ctx.isplit(2 * full[mine], np.arange(4), owners, cols)
        late = second.wait()
        early = first.wait()
        return early, late

    for rank, (early, late) in enumerate(group.run(body)):
        lo, hi = cols[rank]
        assert np.array_equal(early, full[:, lo:hi])
        assert np.array_equal(late, 2 * full[:, lo:hi])


def test_rounds_stay_unique_across_runs():
    group = WorkerGroup(2)
    group.run(lambda ctx: ctx.barrier())
    group.run(lambda ctx: ctx.barrier())
    assert group.ledger_snapshot().num_rounds("barrier") == 2


def test_dim_ranges_need_a_column_per_worker():
    with pytest.raises(CollectiveError):
        WorkerGroup(4).dim_ranges(3)
    assert WorkerGroup(3).dim_ranges(10) == [(0, 4), (4, 7), (7, 10)]


def test_allreduce_of_ones_on_four_workers():
    group = WorkerGroup(4)
    out = group.run(lambda ctx: ctx.allreduce_sum(np.ones(3)))
    for value in out:
        assert np.array_equal(value, np.full(3, 4.0))


def test_snapshot_before_any_collective_is_empty_and_repeatable():
    group = WorkerGroup(3)
    first = group.ledger_snapshot()
    assert first.num_rounds() == 0 and first.total_sent() == 0
    assert first == group.ledger_snapshot()


def test_all_share_sends_own_values_to_every_peer():
    group = WorkerGroup(3)
    keys = [np.array([0, 3]), np.array([1]), np.array([2, 4, 5])]
    group.run(lambda ctx: ctx.all_share(keys[ctx.rank], np.ones(len(keys[ctx.rank])), total_keys=6))
    sent = group.ledger_snapshot().per_worker("all_share", None, "sent")
    assert sent == [len(k) * 2 for k in keys]


def test_gather_of_all_rows_two_workers_moves_half_the_matrix_each():
    full = np.arange(16.0).reshape(4, 4)
    owners = np.array([0, 0, 1, 1])
    rows = np.arange(4)
    group = WorkerGroup(2)
    cols = group.dim_ranges(4)
    group.run(lambda ctx: ctx.gather(full[:, slice(*cols[ctx.rank])], rows, owners, cols))
    assert group.ledger_snapshot().per_worker("gather", None, "sent") == [4, 4]
