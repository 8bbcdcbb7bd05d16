import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseidon.modelspec import (ClusterConfig, ConfigError, LayerKind, ModelSpec, flatten_offsets,
                                parse_cluster, parse_model)

VGG_FC = [("fc6", 4096, 25088), ("fc7", 4096, 4096), ("fc8", 1000, 4096)]


def vgg_doc():
    layers = [{"name": f"conv{i}", "kind": "opaque", "param_count": 1000 * (i + 1)} for i in range(16)]
    layers += [{"name": n, "kind": "fc", "rows": r, "cols": c} for n, r, c in VGG_FC]
    return {"batch_size": 32, "layers": layers}


def test_nineteen_layer_document():
    m = parse_model(json.dumps(vgg_doc()))
    assert m.num_layers == 19
    assert [l.param_count for l in m.layers[-3:]] == [102760448, 16777216, 4096000]
    assert all(l.kind is LayerKind.INDECOMPOSABLE for l in m.layers[:16])


def test_two_layer_mlp():
    m = parse_model('{"batch_size": 32, "layers": [{"name": "a", "rows": 128, "cols": 784},'
                    ' {"name": "b", "kind": "fc", "rows": 10, "cols": 128}]}')
    assert [l.param_count for l in m.layers] == [100352, 1280]
    assert m.batch_size == 32


@pytest.mark.parametrize("text, fragment", [
    ('{"batch_size": 4, "layers": []}', "non-empty"),
    ('{"batch_size": 0, "layers": [{"name": "a", "rows": 1, "cols": 1}]}', "batch_size"),
    ('{"batch_size": 4, "layers": [{"name": "a", "rows": 0, "cols": 3}]}', "zero dimension"),
    ('{"batch_size": 4, "layers": [{"name": "a", "rows": 2, "cols": 3}, {"name": "a", "rows": 2, "cols": 3}]}',
     "duplicate"),
    ('{"batch_size": 4, "layers": [{"name": "a", "kind": "conv", "param_count": 3}]}', "unknown kind"),
    ('{"batch_size": 4, "layers": [{"name": "a", "kind": "opaque"}]}', "param_count"),
])
def test_semantic_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_model(text)


def test_syntax_error_reports_line():
    text = '{\n  "batch_size": 4,\n  "layers": [\n    {"name": "a",, "rows": 1}\n  ]\n}'
    with pytest.raises(ConfigError) as ei:
        parse_model(text)
    assert ei.value.line == 4


def test_semantic_error_reports_layer_line():
    text = '{\n "batch_size": 4,\n "layers": [\n  {"name": "a", "rows": 2, "cols": 2},\n  {"name": "b", "rows": 0, "cols": 2}\n ]\n}'
    with pytest.raises(ConfigError) as ei:
        parse_model(text)
    assert ei.value.line == 5


@pytest.mark.parametrize("counts, expected", [
    ([6, 4], [(0, 6), (6, 4)]),
    ([10], [(0, 10)]),
    ([100352, 1280], [(0, 100352), (100352, 1280)]),
])
def test_flatten_offsets_examples(counts, expected):
    m = ModelSpec.from_layers([{"name": f"l{i}", "kind": "opaque", "param_count": c}
                               for i, c in enumerate(counts)], batch_size=1)
    assert [tuple(r) for r in flatten_offsets(m)] == expected


layer_entries = st.lists(
    st.one_of(
        st.tuples(st.integers(1, 300), st.integers(1, 300)).map(
            lambda rc: {"kind": "fc", "rows": rc[0], "cols": rc[1]}),
        st.integers(1, 10**6).map(lambda p: {"kind": "opaque", "param_count": p}),
    ),
    min_size=1, max_size=12)


@given(layer_entries, st.integers(1, 512))
def test_parse_serialize_roundtrip(entries, k):
    doc = {"batch_size": k, "layers": [dict(e, name=f"layer{i}") for i, e in enumerate(entries)]}
    m = parse_model(json.dumps(doc))
    assert parse_model(m.dumps()) == m


@given(layer_entries)
def test_offsets_partition_the_vector(entries):
    m = ModelSpec.from_layers([dict(e, name=f"l{i}") for i, e in enumerate(entries)], batch_size=1)
    ranges = flatten_offsets(m)
    pos = 0
    for r, layer in zip(ranges, m.layers):
        assert r.start == pos and r.length == layer.param_count
        pos = r.stop
    assert pos == m.total_params


def test_cluster_parsing_and_roles():
    c = parse_cluster('{"workers": ["a:1", "b:1"], "servers": ["b:1", "c:1"], "bandwidth_mbps": 100}')
    assert (c.n_workers, c.n_servers) == (2, 2)
    assert c.nodes == ("a:1", "b:1", "c:1")
    assert c.node_of_server(0) == 1 and c.node_of_server(1) == 2
    assert c.bandwidth_bits_per_sec == 1e8
    assert c.chunk_bytes == 2 * 2**20
    assert parse_cluster(c.dumps()) == c


@pytest.mark.parametrize("text", [
    '{"workers": [], "servers": ["a:1"]}',
    '{"workers": ["a:1"], "servers": []}',
    '{"workers": ["a:1"], "servers": ["a:1"], "chunk_bytes": 2}',
    '{"workers": ["a:1", "a:1"], "servers": ["a:1"]}',
    '{"workers": "a:1", "servers": ["a:1"]}',
])
def test_cluster_errors(text):
    with pytest.raises(ConfigError):
        parse_cluster(text)


def test_colocated_helper():
    c = ClusterConfig.colocated(3, n_servers=2)
    assert c.workers == ("node0", "node1", "node2") and c.servers == ("node0", "node1")
    assert ClusterConfig.colocated(2, base_port=5000).workers == ("127.0.0.1:5000", "127.0.0.1:5001")
