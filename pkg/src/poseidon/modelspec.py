"""Model, layer and cluster descriptions shared by every other module.

Configuration documents are JSON. A model document looks like::

    {"batch_size": 32,
     "layers": [{"name": "conv", "kind": "opaque", "param_count": 4194304},
                {"name": "fc6", "kind": "fc", "rows": 4096, "cols": 4096}]}

and a cluster document like::

    {"workers": ["10.0.0.1:7000", ...], "servers": [...],
     "chunk_bytes": 2097152, "bandwidth_mbps": 10000}
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

ELEMENT_BYTES = 4  # float32 parameters
DEFAULT_CHUNK_BYTES = 2 * 2**20


class ConfigError(ValueError):
    """Malformed or semantically invalid configuration document."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LayerKind(str, enum.Enum):
    FULLY_CONNECTED = "fc"
    INDECOMPOSABLE = "opaque"


@dataclass(frozen=True)
class LayerSpec:
    index: int
    name: str
    kind: LayerKind
    rows: int  # M, output dimension
    cols: int  # N, input dimension
    param_count: int

    def __post_init__(self):
        if self.param_count <= 0:
            raise ConfigError(f"layer {self.name!r}: param_count must be positive")
        if self.kind is LayerKind.FULLY_CONNECTED:
            if self.rows <= 0 or self.cols <= 0:
                raise ConfigError(f"layer {self.name!r}: zero dimension")
            if self.param_count != self.rows * self.cols:
                raise ConfigError(f"layer {self.name!r}: param_count != rows*cols")
        elif self.has_shape and self.rows * self.cols != self.param_count:
            raise ConfigError(f"layer {self.name!r}: param_count != rows*cols")

    @property
    def is_fc(self) -> bool:
        return self.kind is LayerKind.FULLY_CONNECTED

    @property
    def has_shape(self) -> bool:
        """True if the layer carries a dense (rows, cols) weight the engine can compute."""
        return self.rows > 0 and self.cols > 0

    @property
    def nbytes(self) -> int:
        return self.param_count * ELEMENT_BYTES

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "kind": self.kind.value}
        if self.has_shape:
            d["rows"] = self.rows
            d["cols"] = self.cols
        if not self.is_fc:
            d["param_count"] = self.param_count
        return d


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    batch_size: int

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model has no layers")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for i, layer in enumerate(self.layers):
            if layer.index != i:
                raise ConfigError(f"layer {layer.name!r} has index {layer.index}, expected {i}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate layer name(s): {', '.join(dup)}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.param_count for l in self.layers)

    def layer(self, key: int | str) -> LayerSpec:
        if isinstance(key, int):
            return self.layers[key]
        for layer in self.layers:
            if layer.name == key:
                return layer
        raise KeyError(key)

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "layers": [l.to_dict() for l in self.layers]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_layers(cls, layers, batch_size: int) -> "ModelSpec":
        """Build from ``(name, rows, cols)`` FC tuples or dicts in document form."""
        specs = []
        for i, entry in enumerate(layers):
            if isinstance(entry, LayerSpec):
                entry = entry.to_dict()
            if not isinstance(entry, dict):
                name, rows, cols = entry
                entry = {"name": name, "kind": "fc", "rows": rows, "cols": cols}
            specs.append(_layer_from_dict(i, entry))
        return cls(tuple(specs), batch_size)


@dataclass(frozen=True)
class ClusterConfig:
    workers: tuple[str, ...]
    servers: tuple[str, ...]
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    bandwidth_bits_per_sec: float | None = None

    def __post_init__(self):
        if len(self.workers) < 1:
            raise ConfigError("cluster needs at least one worker")
        if len(self.servers) < 1:
            raise ConfigError("cluster needs at least one server")
        if len(set(self.workers)) != len(self.workers) or len(set(self.servers)) != len(self.servers):
            raise ConfigError("duplicate endpoint within a role list")
        if self.chunk_bytes < ELEMENT_BYTES:
            raise ConfigError(f"chunk_bytes must be >= {ELEMENT_BYTES}")

    @property
    def n_workers(self) -> int:
        return len(self.workers)

    @property
    def n_servers(self) -> int:
        return len(self.servers)

    @property
    def chunk_elements(self) -> int:
        return self.chunk_bytes // ELEMENT_BYTES

    @property
    def nodes(self) -> tuple[str, ...]:
        """Distinct endpoints: workers first, then server-only endpoints."""
        seen = dict.fromkeys(self.workers)
        for s in self.servers:
            seen.setdefault(s)
        return tuple(seen)

    def node_of_worker(self, rank: int) -> int:
        return self.nodes.index(self.workers[rank])

    def node_of_server(self, rank: int) -> int:
        return self.nodes.index(self.servers[rank])

    def to_dict(self) -> dict:
        d: dict = {
            "workers": list(self.workers),
            "servers": list(self.servers),
            "chunk_bytes": self.chunk_bytes,
        }
        if self.bandwidth_bits_per_sec is not None:
            d["bandwidth_mbps"] = self.bandwidth_bits_per_sec / 1e6
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def colocated(cls, n: int, *, n_servers: int | None = None, host: str = "127.0.0.1",
                  base_port: int | None = None, **kw) -> "ClusterConfig":
        """``n`` worker nodes, the first ``n_servers`` (default all) also hosting a shard.

        Without ``base_port`` the endpoints are symbolic (``node0``...), which is
        what the simulated transport uses.
        """
        n_servers = n if n_servers is None else n_servers
        total = max(n, n_servers)
        if base_port is None:
            eps = [f"node{i}" for i in range(total)]
        else:
            eps = [f"{host}:{base_port + i}" for i in range(total)]
        return cls(tuple(eps[:n]), tuple(eps[:n_servers]), **kw)


def _require_int(entry: dict, key: str, where: str) -> int:
    value = entry.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{where}: {key!r} must be an integer")
    return value


def _layer_from_dict(index: int, entry: dict, line: int | None = None) -> LayerSpec:
    where = f"layer {index}"
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected an object", line)
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError(f"{where}: missing name", line)
    where = f"layer {name!r}"
    try:
        kind = LayerKind(entry.get("kind", "fc"))
    except ValueError:
        raise ConfigError(f"{where}: unknown kind {entry.get('kind')!r}", line) from None
    try:
        if kind is LayerKind.FULLY_CONNECTED:
            rows = _require_int(entry, "rows", where)
            cols = _require_int(entry, "cols", where)
            if rows <= 0 or cols <= 0:
                raise ConfigError(f"{where}: zero dimension")
            return LayerSpec(index, name, kind, rows, cols, rows * cols)
        # opaque layers may carry a dense shape so the reference engine can run them
        param_count = _require_int(entry, "param_count", where)
        rows = entry.get("rows", 0)
        cols = entry.get("cols", 0)
        return LayerSpec(index, name, kind, int(rows), int(cols), param_count)
    except ConfigError as e:
        raise ConfigError(str(e), line) from None


def _line_of(text: str, needle_index: int) -> int | None:
    """Best-effort source line of the ``needle_index``-th layer object."""
    pos = text.find('"layers"')
    if pos < 0:
        return None
    depth = 0
    count = -1
    for i in range(text.find("[", pos) + 1, len(text)):
        c = text[i]
        if c == "{":
            if depth == 0:
                count += 1
                if count == needle_index:
                    return text.count("\n", 0, i) + 1
            depth += 1
        elif c == "}":
            depth -= 1
        elif c == "]" and depth == 0:
            break
    return None


def parse_model(text: str) -> ModelSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"syntax error: {e.msg}", e.lineno) from None
    if not isinstance(doc, dict):
        raise ConfigError("model document must be a JSON object", 1)
    batch_size = doc.get("batch_size")
    if not isinstance(batch_size, int) or isinstance(batch_size, bool) or batch_size < 1:
        raise ConfigError("batch_size must be a positive integer")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ConfigError("layers must be a non-empty list")
    layers = tuple(_layer_from_dict(i, e, _line_of(text, i)) for i, e in enumerate(raw_layers))
    return ModelSpec(layers, batch_size)


def parse_cluster(text: str) -> ClusterConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"syntax error: {e.msg}", e.lineno) from None
    if not isinstance(doc, dict):
        raise ConfigError("cluster document must be a JSON object", 1)
    workers = doc.get("workers")
    servers = doc.get("servers")
    for key, value in (("workers", workers), ("servers", servers)):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key} must be a list of 'host:port' strings")
    chunk_bytes = doc.get("chunk_bytes", DEFAULT_CHUNK_BYTES)
    if not isinstance(chunk_bytes, int):
        raise ConfigError("chunk_bytes must be an integer")
    bw = doc.get("bandwidth_mbps")
    if bw is not None and (not isinstance(bw, (int, float)) or bw <= 0):
        raise ConfigError("bandwidth_mbps must be a positive number")
    return ClusterConfig(
        tuple(workers), tuple(servers), chunk_bytes,
        None if bw is None else float(bw) * 1e6,
    )


def load_model(path: str | Path) -> ModelSpec:
    return parse_model(Path(path).read_text())


def load_cluster(path: str | Path) -> ClusterConfig:
    return parse_cluster(Path(path).read_text())


@dataclass(frozen=True)
class LayerRange:
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def __iter__(self):
        yield self.start
        yield self.length


def flatten_offsets(model: ModelSpec) -> list[LayerRange]:
    """Per-layer ``(start, length)`` in the global flattened parameter vector."""
    out = []
    start = 0
    for layer in model.layers:
        out.append(LayerRange(start, layer.param_count))
        start += layer.param_count
    return out
