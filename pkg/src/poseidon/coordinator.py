"""Cluster bootstrap: the information book every node shares.

The coordinator lives in the rank-0 worker process.  It derives the plan,
routes, chunk assignment and port map from the model and cluster documents,
and ships the serialized book to every other node.  After bootstrap the book
is frozen; ``query`` and ``best_scheme`` read only the local copy.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

from .kvstore import ChunkInfo, ChunkTable, partition
from .modelspec import ClusterConfig, ModelSpec, flatten_offsets, parse_cluster, parse_model
from .planner import CommPlan, Scheme, best_scheme
from .syncer import Route, chunked_layers, routes_for_mode

DEFAULT_BASE_PORT = 47000


def assign_ports(cluster: ClusterConfig, base_port: int = DEFAULT_BASE_PORT) -> dict[str, tuple[str, int]]:
    """Endpoint -> (host, port).

    Explicit ``host:port`` endpoints keep their port; bare hosts (or port 0) get
    ``base_port + index`` where index runs over workers, then server-only nodes.
    """
    out = {}
    for i, ep in enumerate(cluster.nodes):
        host, sep, port = ep.rpartition(":")
        if not sep or not port.isdigit():
            host, port = ep, "0"
        p = int(port) or base_port + i
        out[ep] = (host, p)
    seen: dict[tuple[str, int], str] = {}
    for ep, hp in out.items():
        if hp in seen:
            raise ValueError(f"port collision: {ep} and {seen[hp]} both map to {hp[0]}:{hp[1]}")
        seen[hp] = ep
    return out


@dataclass(frozen=True)
class InformationBook:
    model: ModelSpec
    cluster: ClusterConfig
    mode: str
    plan: CommPlan
    routes: tuple[Route, ...]
    chunks: ChunkTable
    ports: dict[str, tuple[str, int]]

    # -- derived --------------------------------------------------------------

    @cached_property
    def properties(self) -> dict:
        props: dict = {
            "n_worker": self.cluster.n_workers,
            "n_server": self.cluster.n_servers,
            "batchsize": self.model.batch_size,
        }
        for layer in self.model.layers:
            props[layer.name] = {
                "type": "FC" if layer.is_fc else "CONV",
                "width": layer.rows,
                "height": layer.cols,
                "param_count": layer.param_count,
            }
        return props

    @cached_property
    def offsets(self):
        return flatten_offsets(self.model)

    @property
    def endpoints(self) -> list[tuple[str, int]]:
        return [self.ports[ep] for ep in self.cluster.nodes]

    def query(self, *names: str):
        """Values of the named properties, in order (a single value for a single name)."""
        props = self.properties
        missing = [n for n in names if n not in props]
        if missing:
            raise KeyError(f"unknown propert{'y' if len(missing) == 1 else 'ies'}: {', '.join(missing)}")
        vals = tuple(props[n] for n in names)
        return vals[0] if len(vals) == 1 else vals

    def best_scheme(self, layer: int | str) -> Scheme:
        return best_scheme(self.model.layer(layer), self.model, self.cluster)

    # -- wire form ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "cluster": self.cluster.to_dict(),
            "mode": self.mode,
            "plan": self.plan.to_dict(),
            "routes": [r.value for r in self.routes],
            "chunks": [[c.chunk_id, c.layer, c.start, c.length, c.server] for c in self.chunks.chunks],
            "ports": {ep: [h, p] for ep, (h, p) in self.ports.items()},
            "properties": self.properties,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "InformationBook":
        doc = json.loads(data)
        model = parse_model(json.dumps(doc["model"]))
        cluster = parse_cluster(json.dumps(doc["cluster"]))
        chunks = ChunkTable(tuple(ChunkInfo(*c) for c in doc["chunks"]), cluster.n_servers)
        return cls(model, cluster, doc["mode"], CommPlan.from_dict(doc["plan"]),
                   tuple(Route(r) for r in doc["routes"]), chunks,
                   {ep: (h, p) for ep, (h, p) in doc["ports"].items()})


def bootstrap(model: ModelSpec, cluster: ClusterConfig, mode: str = "hybrid",
              base_port: int = DEFAULT_BASE_PORT) -> InformationBook:
    """Plan, partition and assign ports. Deterministic in its inputs."""
    plan, routes = routes_for_mode(model, cluster, mode)
    chunks = partition(model, cluster, layers=chunked_layers(routes))
    return InformationBook(model, cluster, mode, plan, routes, chunks, assign_ports(cluster, base_port))
