import json
from fractions import Fraction
import math

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from poseidon.modelspec import ClusterConfig, ModelSpec
from poseidon.planner import (CommPlan, Role, Scheme, adam_cost, best_scheme, format_plan, plan, prefers_sfb,
                              ps_cost, sfb_cost)


def fc_model(M, N, K):
    return ModelSpec.from_layers([("fc", M, N)], batch_size=K)


def test_ps_cost_examples():
    assert ps_cost(4096, 4096, 8, 8, Role.WORKER_ONLY) == 33_554_432
    assert ps_cost(4096, 4096, 8, 8, Role.SERVER_AND_WORKER) == 58_720_256
    assert ps_cost(1, 1, 1, 1, Role.SERVER_AND_WORKER) == 0
    assert ps_cost(4096, 4096, 8, 8, Role.SERVER_ONLY) == 33_554_432


def test_ps_cost_rounds_up():
    # 2/3 rounds up to 1; 2*(3+2-2)/2 = 3 is exact
    assert ps_cost(1, 1, 1, 3, Role.SERVER_ONLY) == 1
    assert ps_cost(1, 1, 3, 2, Role.SERVER_AND_WORKER) == 3


def test_sfb_cost_examples():
    assert sfb_cost(4096, 4096, 32, 8) == 3_670_016
    assert sfb_cost(4096, 4096, 32, 1) == 0
    assert sfb_cost(4, 3, 2, 2) == 28


def test_adam_cost_examples():
    assert adam_cost(4096, 4096, 32, 8, Role.SERVER_ONLY) == 136_314_880
    assert adam_cost(7, 9, 5, 1, Role.SERVER_AND_WORKER) == 0
    assert adam_cost(4, 3, 2, 2, Role.WORKER_ONLY) == 26


def test_best_scheme_examples():
    m = fc_model(4096, 4096, 32)
    assert best_scheme(m.layers[0], m, ClusterConfig.colocated(8)) is Scheme.SFB
    g = fc_model(1024, 1000, 128)
    assert best_scheme(g.layers[0], g, ClusterConfig.colocated(16)) is Scheme.PS
    assert 2 * 128 * 15 * 2024 == 7_772_160 and 2 * 1024000 * 30 // 16 == 3_840_000


def test_opaque_layers_always_ps():
    m = ModelSpec.from_layers([{"name": "c", "kind": "opaque", "param_count": 10**8}], batch_size=1)
    assert best_scheme(m.layers[0], m, ClusterConfig.colocated(8)) is Scheme.PS
    p = plan(m, ClusterConfig.colocated(8), force=Scheme.SFB)
    assert p.schemes == (Scheme.PS,)


def test_foreign_layer_rejected():
    m, other = fc_model(4, 4, 1), fc_model(5, 5, 1)
    with pytest.raises(ValueError):
        best_scheme(other.layers[0], m, ClusterConfig.colocated(2))


def test_vgg_fc_layers_all_sfb():
    m = ModelSpec.from_layers([("fc6", 4096, 25088), ("fc7", 4096, 4096), ("fc8", 1000, 4096)], batch_size=32)
    assert plan(m, ClusterConfig.colocated(8)).schemes == (Scheme.SFB,) * 3


def test_tie_goes_to_sfb():
    # Search small instances for an exact tie of the two sides, then check the choice.
    found = 0
    for M in range(1, 40):
        for N in range(1, 40):
            for K in range(1, 8):
                for P in (2, 3, 4):
                    lhs = 2 * K * (P - 1) * (M + N)
                    rhs = Fraction(2 * M * N * (2 * P - 2), P)
                    if lhs == rhs:
                        found += 1
                        m = fc_model(M, N, K)
                        assert best_scheme(m.layers[0], m, ClusterConfig.colocated(P)) is Scheme.SFB
                        bigger = fc_model(M, N, K + 1)
                        assert best_scheme(bigger.layers[0], bigger, ClusterConfig.colocated(P)) is Scheme.PS
    assert found > 0


dims = st.integers(1, 5000)


@given(dims, dims, st.integers(1, 256), st.integers(1, 32), st.integers(1, 32))
def test_prefers_sfb_matches_real_valued_rule(M, N, K, P1, P2):
    expected = Fraction(2 * K * (P1 - 1) * (M + N)) <= Fraction(2 * M * N * (P1 + P2 - 2), P2)
    assert prefers_sfb(M, N, K, P1, P2) == expected


@given(dims, dims, st.integers(1, 256), st.integers(1, 32), st.integers(1, 32))
def test_larger_batch_never_flips_to_sfb(M, N, K, P1, P2):
    if not prefers_sfb(M, N, K, P1, P2):
        assert not prefers_sfb(M, N, K + 1, P1, P2)


@given(dims, dims, st.integers(1, 256), st.integers(1, 32))
def test_more_workers_flip_to_ps_only_when_sfb_grows_faster(M, N, K, P2):
    assume(prefers_sfb(M, N, K, 2, P2))
    # P2 * (SFB - PS) is linear in P1 with slope 2(K(M+N)P2 - MN)
    slope = 2 * (K * (M + N) * P2 - M * N)
    if slope <= 0:
        for P1 in (3, 10, 1000, 10**6):
            assert prefers_sfb(M, N, K, P1, P2)
        return
    at2 = 2 * K * (M + N) * P2 - 2 * M * N * P2  # margin at P1 = 2, <= 0 here
    flip = 2 + (-at2) // slope + 1
    assert prefers_sfb(M, N, K, flip - 1, P2)
    assert not any(prefers_sfb(M, N, K, p, P2) for p in (flip, flip + 1, 2 * flip + 7))


@given(st.lists(st.tuples(st.booleans(), dims, dims), min_size=1, max_size=6), st.integers(1, 64),
       st.integers(1, 16), st.integers(1, 16))
def test_plan_totals_are_sums(layers, K, P1, P2):
    spec = []
    for i, (fc, a, b) in enumerate(layers):
        spec.append((f"l{i}", a, b) if fc else {"name": f"l{i}", "kind": "opaque", "param_count": a * b})
    m = ModelSpec.from_layers(spec, batch_size=K)
    c = ClusterConfig(tuple(f"w{i}" for i in range(P1)), tuple(f"w{i}" for i in range(P2)))
    p = plan(m, c)
    expect = 0
    for layer, lp in zip(m.layers, p.layers):
        if lp.scheme is Scheme.SFB:
            assert layer.is_fc
            expect += sfb_cost(layer.rows, layer.cols, K, P1)
        else:
            expect += math.ceil(Fraction(2 * layer.param_count * (P1 + P2 - 2), P2))
    assert p.colocated_total == expect
    assert p.worker_total == sum(l.worker_elements for l in p.layers)


def test_plan_formats_roundtrip():
    m = ModelSpec.from_layers([("fc6", 4096, 4096), {"name": "c", "kind": "opaque", "param_count": 99}],
                              batch_size=32)
    p = plan(m, ClusterConfig.colocated(8))
    assert CommPlan.from_dict(json.loads(format_plan(p, "json"))) == p
    csv_text = format_plan(p, "csv").splitlines()
    assert csv_text[0].startswith("index,name,scheme") and csv_text[1].startswith("0,fc6,SFB,3670016")
    assert "TOTAL" in format_plan(p, "table")
    with pytest.raises(ValueError):
        format_plan(p, "xml")
