import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from poseidon.baselines import (QuantState, adam_expected_elements, decode_onebit_chunk, dequantize,
                                encode_onebit_chunk, onebit_payload_size, quantize_1bit)
from poseidon.engine import make_synthetic_dataset
from poseidon.errors import ProtocolError
from poseidon.modelspec import ClusterConfig, ModelSpec
from poseidon.runtime import train_distributed
from poseidon.transport import HEADER_SIZE


def test_constant_gradient_quantizes_exactly():
    st_ = QuantState((3, 2))
    q, r = quantize_1bit(np.full((3, 2), 0.25), st_)
    assert q.bits.all()
    np.testing.assert_array_equal(dequantize(q), np.full((3, 2), 0.25))
    assert not r.any()


def test_residual_carries_quantization_error():
    s = QuantState((2, 1))
    q, r = quantize_1bit(np.array([[3.0], [1.0]]), s)
    np.testing.assert_array_equal(dequantize(q), [[2.0], [2.0]])
    np.testing.assert_array_equal(r, [[1.0], [-1.0]])
    with pytest.raises(ValueError):
        quantize_1bit(np.zeros((1, 2)), s)


grads = st.integers(1, 6).flatmap(lambda m: st.integers(1, 6).flatmap(lambda n: st.lists(
    arrays(np.float32, (m, n), elements=st.floats(-2, 2, width=32)), min_size=1, max_size=12)))


@given(grads)
def test_residual_telescopes(seq):
    s = QuantState(seq[0].shape)
    sent = np.zeros(seq[0].shape)
    for g in seq:
        before = s.residual.copy()
        q, r = quantize_1bit(g, s)
        deq = dequantize(q).astype(np.float64)
        # per step, bit for bit: new residual = gradient + old residual - what was sent
        np.testing.assert_array_equal(r, (g.astype(np.float64) + before) - deq)
        sent += deq
    total = np.sum([g.astype(np.float64) for g in seq], axis=0)
    np.testing.assert_allclose(sent + s.residual, total, rtol=0, atol=1e-12)


@given(st.integers(1, 7), st.integers(1, 9), st.integers(0, 100), st.data())
def test_onebit_chunk_codec(m, n, seed, data):
    g = np.random.default_rng(seed).standard_normal((m, n))
    q, _ = quantize_1bit(g, QuantState((m, n)))
    start = data.draw(st.integers(0, m * n - 1))
    length = data.draw(st.integers(1, m * n - start))
    p = encode_onebit_chunk(q, start, length)
    assert len(p) == onebit_payload_size(n, length)
    np.testing.assert_array_equal(decode_onebit_chunk(p, length),
                                  dequantize(q).reshape(-1)[start:start + length].astype(np.float32))
    with pytest.raises(ProtocolError):
        decode_onebit_chunk(p, length + 1)
    with pytest.raises(ProtocolError):
        decode_onebit_chunk(p[:-1], length)


def test_adam_expected_rows():
    assert adam_expected_elements(4, 3, 2, 2) == {"shard": 52, "worker": 26}
    assert adam_expected_elements(4, 3, 2, 2, colocated=True) == {"shard": 26, "worker": 26}


def test_adam_traffic_with_dedicated_shard():
    # P1=2 workers, one server-only node; FC M=4 (out) x N=3 (in), K=2
    m = ModelSpec.from_layers([("fc", 4, 3)], batch_size=2)
    c = ClusterConfig(("w0", "w1"), ("s0",))
    d = make_synthetic_dataset(0, 16, 3, 4)
    res = train_distributed(m, c, "adam", iterations=1, data=d, backend="sim")
    meter = res.meter
    push = HEADER_SIZE + 12 + 4 * 2 * (4 + 3)
    pull = HEADER_SIZE + 4 * 4 * 3
    assert meter.bytes_in[2] == 2 * push and meter.bytes_out[2] == 2 * pull
    # strip framing: shard receives 28 elements and sends 24, the cost-model 52
    assert (meter.bytes_in[2] - 2 * (HEADER_SIZE + 12)) // 4 == 28
    assert (meter.bytes_out[2] - 2 * HEADER_SIZE) // 4 == 24
    for w in (0, 1):
        elems = (meter.total(w) - 2 * HEADER_SIZE - 12) // 4
        assert elems == adam_expected_elements(4, 3, 2, 2)["worker"] == 26


def test_adam_matches_ps_parameters():
    m = ModelSpec.from_layers([("fc1", 8, 6), ("fc2", 3, 8)], batch_size=4)
    c = ClusterConfig.colocated(2, chunk_bytes=64)
    d = make_synthetic_dataset(1, 64, 6, 3)
    a = train_distributed(m, c, "adam", iterations=5, data=d, backend="sim")
    p = train_distributed(m, c, "ps", iterations=5, data=d, backend="sim")
    for x, y in zip(a.weights[0], p.weights[0]):
        np.testing.assert_allclose(x, y, rtol=1e-6, atol=1e-7)
