import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseidon.errors import ProtocolError, StaleUpdateError
from poseidon.kvstore import KVShard, partition, read_snapshot
from poseidon.modelspec import ClusterConfig, ModelSpec
from poseidon.planner import plan

MIB = 2**20


def _opaque(*counts, K=8):
    return ModelSpec.from_layers(
        [{"name": f"l{i}", "kind": "opaque", "param_count": c} for i, c in enumerate(counts)], batch_size=K)


def test_two_chunks_one_per_server():
    t = partition(_opaque(MIB), ClusterConfig.colocated(2, chunk_bytes=2 * MIB))
    assert [(c.start, c.length, c.server) for c in t.chunks] == [(0, 524288, 0), (524288, 524288, 1)]
    assert t.assignment == {0: 0, 1: 1}


def test_tiny_layer_single_chunk():
    t = partition(_opaque(10), ClusterConfig.colocated(1))
    assert len(t) == 1 and t[0].server == 0 and t[0].length == 10


def test_sfb_layers_are_not_chunked():
    m = ModelSpec.from_layers([("fc", 4096, 4096), {"name": "c", "kind": "opaque", "param_count": 100}],
                              batch_size=32)
    c = ClusterConfig.colocated(8)
    t = partition(m, c, plan(m, c))
    assert {ch.layer for ch in t.chunks} == {1}


@given(st.lists(st.integers(1, 5000), min_size=1, max_size=8), st.integers(1, 6), st.integers(1, 300))
def test_partition_properties(counts, n_servers, cap):
    m = _opaque(*counts)
    t = partition(m, ClusterConfig.colocated(n_servers, chunk_bytes=4 * cap))
    assert len(t) == sum(math.ceil(c / cap) for c in counts)
    covered = np.zeros(sum(counts), int)
    for c in t.chunks:
        assert 1 <= c.length <= cap
        covered[c.start:c.stop] += 1
    assert (covered == 1).all()
    per = np.bincount([c.server for c in t.chunks], minlength=n_servers)
    assert per.max() - per.min() <= 1
    loads = t.server_loads()
    assert max(loads) - min(loads) <= 4 * cap


def _shard(n_workers=2, length=2, initial=None):
    t = partition(_opaque(length), ClusterConfig.colocated(1))
    return KVShard(list(t.chunks), initial, n_workers)


def test_aggregation_and_broadcast():
    s = _shard(initial=np.zeros(2, np.float32))
    assert s.receive_update(0, 0, np.array([1, 2], np.float32), origin=0)
    assert s.maybe_broadcast(0) is None
    s.receive_update(0, 0, np.array([0.5, -1], np.float32), origin=1)
    msg = s.maybe_broadcast(0)
    np.testing.assert_array_equal(msg.values, [1.5, 1.0])
    c = s.chunks[0]
    assert msg.iteration == 0 and c.iteration == 1 and c.update_count == 0


def test_update_errors():
    s = _shard()
    with pytest.raises(StaleUpdateError):
        s.receive_update(0, 1, np.zeros(2, np.float32), 0)
    with pytest.raises(ProtocolError):
        s.receive_update(0, 0, np.zeros(3, np.float32), 0)
    s.receive_update(0, 0, np.zeros(2, np.float32), 0)
    with pytest.raises(ProtocolError, match="duplicate"):
        s.receive_update(0, 0, np.zeros(2, np.float32), 0)


def test_straggler_drop_broadcasts_early_and_ignores_late_update():
    s = _shard(n_workers=3)
    for w in (0, 1):
        s.receive_update(0, 0, np.ones(2, np.float32), w)
    assert s.maybe_broadcast(0) is None
    s.drop_worker(0, 2)
    msg = s.maybe_broadcast(0)
    np.testing.assert_array_equal(msg.values, [2, 2])
    assert not s.receive_update(0, 0, np.ones(2, np.float32), 2)
    assert s.live_workers(s.chunks[0]) == 3


def test_snapshot_roundtrip(tmp_path):
    t = partition(_opaque(7, 5), ClusterConfig.colocated(1, chunk_bytes=16))
    init = np.arange(12, dtype=np.float32)
    s = KVShard(list(t.chunks), init, 1)
    for cid in s.chunks:
        c = s.chunks[cid]
        s.receive_update(cid, 0, np.full(c.length, 0.25, np.float32), 0)
        s.maybe_broadcast(cid)
    path = tmp_path / "shard.bin"
    s.checkpoint(path)
    assert path.read_bytes()[:4] == b"PSDN"
    assert len(path.read_bytes()) == 12 + 32 * len(t) + 4 * 12
    fresh = KVShard(list(t.chunks), None, 1)
    fresh.restore(path)
    for cid, c in s.chunks.items():
        np.testing.assert_array_equal(fresh.chunks[cid].values, c.values)
        assert fresh.chunks[cid].iteration == 1
    assert sorted(read_snapshot(path)) == sorted(s.chunks)


def test_snapshot_at_iteration_zero_and_mismatch(tmp_path):
    s = _shard(length=3, initial=np.ones(3, np.float32))
    s.checkpoint(tmp_path / "a")
    other = _shard(length=4)
    with pytest.raises(ValueError):
        other.restore(tmp_path / "a")
    back = _shard(length=3)
    back.restore(tmp_path / "a")
    assert back.chunks[0].iteration == 0
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        read_snapshot(tmp_path / "bad")


@given(st.integers(2, 5), st.integers(0, 10**6))
def test_order_invariance(n_workers, seed):
    rng = np.random.default_rng(seed)
    deltas = rng.standard_normal((n_workers, 6)).astype(np.float32)
    results = []
    for order in itertools.islice(itertools.permutations(range(n_workers)), 6):
        s = _shard(n_workers, 6, np.ones(6, np.float32))
        s.trace = []
        for w in order:
            assert s.maybe_broadcast(0) is None
            s.receive_update(0, 0, deltas[w], w)
        results.append(s.maybe_broadcast(0).values)
        assert s.trace[-1][0] == "broadcast" and s.trace[-1][3] == frozenset(range(n_workers))
    ref = 1 + deltas.astype(np.float64).sum(0)
    for r in results:
        np.testing.assert_allclose(r, ref, rtol=1e-6, atol=1e-6)
