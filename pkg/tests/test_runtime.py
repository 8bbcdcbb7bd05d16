import numpy as np
import pytest

from poseidon.coordinator import bootstrap
from poseidon.engine import MLP, make_synthetic_dataset, train_oracle
from poseidon.modelspec import ClusterConfig, ModelSpec
from poseidon.planner import Role, plan, ps_cost
from poseidon.runtime import Server, book_for, train_distributed
from poseidon.transport import HEADER_SIZE, Frame, MsgType, SimConfig, SimEndpoint, SimNetwork

from conftest import rel_err, small_model

MODES = ["ps", "sfb", "hybrid", "adam", "sequential-ps"]


def _data(model, p, seed=0):
    return make_synthetic_dataset(seed, 32 * p * model.batch_size, model.layers[0].cols, model.layers[-1].rows)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("p", [1, 2, 4])
def test_sim_matches_oracle(mode, p):
    m = small_model()
    d = _data(m, p)
    res = train_distributed(m, ClusterConfig.colocated(p, chunk_bytes=1024), mode, iterations=8, data=d,
                            backend="sim", keep_snapshots=True)
    ref = train_oracle(m, d, p, 0.1, 8, 0)
    for got, want in zip(res.snapshots, ref.snapshots):
        for a, b in zip(got, want):
            if p == 1:
                np.testing.assert_array_equal(a, b)
            else:
                assert rel_err(a, b) <= 1e-5
    for w in res.weights[1:]:
        for a, b in zip(w, res.weights[0]):
            np.testing.assert_array_equal(a, b)
    assert res.losses == pytest.approx(ref.losses, rel=1e-5)


@pytest.mark.parametrize("seed", range(4))
def test_reordering_network_keeps_equivalence(seed):
    m = small_model()
    d = _data(m, 3, seed)
    res = train_distributed(m, ClusterConfig.colocated(3, chunk_bytes=256), "hybrid", iterations=5, data=d,
                            seed=seed, backend="sim", sim=SimConfig(100.0, 0.5, seed, True))
    ref = train_oracle(m, d, 3, 0.1, 5, seed)
    for a, b in zip(res.weights[0], ref.weights):
        assert rel_err(a, b) <= 1e-5


@pytest.mark.parametrize("mode", ["hybrid", "sequential-ps", "onebit"])
def test_tcp_backend(mode):
    m = small_model()
    d = _data(m, 2)
    res = train_distributed(m, ClusterConfig.colocated(2, chunk_bytes=1024), mode, iterations=6, data=d,
                            backend="tcp", timeout=30)
    for a, b in zip(res.weights[0], res.weights[1]):
        np.testing.assert_array_equal(a, b)
    assert len(res.metrics[0]) == 6 and all(x.bytes_out > 0 for x in res.metrics[0])
    if mode != "onebit":
        ref = train_oracle(m, d, 2, 0.1, 6, 0)
        for a, b in zip(res.weights[0], ref.weights):
            assert rel_err(a, b) <= 1e-5


def test_wfbp_and_sequential_agree():
    m = small_model()
    d = _data(m, 4)
    c = ClusterConfig.colocated(4, chunk_bytes=512)
    a = train_distributed(m, c, "ps", iterations=6, data=d, backend="tcp")
    b = train_distributed(m, c, "sequential-ps", iterations=6, data=d, backend="tcp")
    for x, y in zip(a.weights[0], b.weights[0]):
        assert rel_err(x, y) <= 1e-6


def test_onebit_stays_close_to_exact():
    m = small_model()
    d = _data(m, 2)
    c = ClusterConfig.colocated(2, chunk_bytes=1024)
    q = train_distributed(m, c, "onebit", iterations=10, data=d, backend="sim")
    e = train_distributed(m, c, "ps", iterations=10, data=d, backend="sim")
    assert all(np.isfinite(w).all() for w in q.weights[0])
    np.testing.assert_array_equal(q.weights[0][1], q.weights[1][1])
    assert 0 < rel_err(q.weights[0][0], e.weights[0][0]) < 0.1


def test_custom_plan_and_bad_plan():
    m, c = small_model(), ClusterConfig.colocated(2)
    book, mode = book_for(m, c, plan(m, c))
    assert mode == "custom"
    with pytest.raises(TypeError):
        book_for(m, c, 3)
    with pytest.raises(ValueError):
        train_distributed(m, c, iterations=1, backend="carrier-pigeon")


def test_ps_wire_bytes_match_cost_model():
    # one 256x256 layer, P1=P2=4, 16 equal chunks: every node moves 2MN(P1+P2-2)/P2 elements
    m = ModelSpec.from_layers([("fc", 256, 256)], batch_size=4)
    c = ClusterConfig.colocated(4, chunk_bytes=16384)
    d = make_synthetic_dataset(0, 1024, 256, 256)
    res = train_distributed(m, c, "ps", iterations=1, data=d, backend="sim")
    want = ps_cost(256, 256, 4, 4, Role.SERVER_AND_WORKER) * 4
    for n in range(4):
        assert res.meter.total(n) >= want
        assert res.meter.total(n) / want - 1 < 0.01


def test_worker_failure_aborts_run(monkeypatch):
    calls = {"n": 0}
    orig = Server.on_push

    def flaky(self, frame):
        calls["n"] += 1
        if calls["n"] > 20:
            raise RuntimeError("shard crashed")
        return orig(self, frame)

    monkeypatch.setattr(Server, "on_push", flaky)
    m = small_model()
    with pytest.raises(RuntimeError, match="shard crashed"):
        train_distributed(m, ClusterConfig.colocated(2, chunk_bytes=1024), "ps", iterations=10,
                          data=_data(m, 2), backend="tcp", timeout=10)


def test_straggler_is_dropped_after_deadline():
    m = ModelSpec.from_layers([("fc", 2, 2)], batch_size=1)
    c = ClusterConfig.colocated(3, n_servers=1)
    book = bootstrap(m, c, "ps")
    net = SimNetwork(3, 1e6)
    got = []
    for n in (1, 2):
        net.register(n, lambda f, s, n=n: got.append((n, f)))
    server = Server(book, 0, SimEndpoint(net, 0), MLP(m, 0).weights, straggler_timeout=0.05)
    net.register(0, lambda f, s: server.on_push(f) if f.msg_type is MsgType.PUSH_CHUNK else got.append((0, f)))
    delta = np.full(4, 0.5, np.float32).tobytes()
    for w in (0, 1):
        net.send_frame(w, 0, Frame(MsgType.PUSH_CHUNK, 0, 0, 0, w, delta))
    net.run(until=0.01)
    assert got == []
    net.run()
    assert net.now >= 0.05 and len(got) == 3
    np.testing.assert_allclose(np.frombuffer(got[0][1].payload, "<f4"),
                               MLP(m, 0).weights[0].reshape(-1) + 1.0, rtol=1e-6)
    net.send_frame(2, 0, Frame(MsgType.PUSH_CHUNK, 0, 0, 0, 2, delta))  # late: ignored
    net.run()
    assert len(got) == 3 and server.shard.chunks[0].iteration == 1
