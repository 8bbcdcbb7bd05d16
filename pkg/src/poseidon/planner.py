"""Communication cost model and per-layer scheme selection.

Costs are counted in parameter elements moved through one node's network
interface per iteration (inbound plus outbound).  Bytes are ``4 * elements``.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction

from .modelspec import ELEMENT_BYTES, ClusterConfig, LayerSpec, ModelSpec


class Scheme(str, enum.Enum):
    PS = "PS"
    SFB = "SFB"
    ADAM = "AdamPushPull"


class Role(str, enum.Enum):
    SERVER_ONLY = "server"
    WORKER_ONLY = "worker"
    SERVER_AND_WORKER = "server+worker"


@dataclass(frozen=True)
class CostEstimate:
    scheme: Scheme
    role: Role
    elements: int

    @property
    def bytes(self) -> int:
        return self.elements * ELEMENT_BYTES


def _ceil(x: Fraction) -> int:
    return math.ceil(x)


def ps_cost(M: int, N: int, P1: int, P2: int, role: Role) -> int:
    if role is Role.SERVER_ONLY:
        return _ceil(Fraction(2 * P1 * M * N, P2))
    if role is Role.WORKER_ONLY:
        return 2 * M * N
    return _ceil(Fraction(2 * M * N * (P1 + P2 - 2), P2))


def sfb_cost(M: int, N: int, K: int, P1: int) -> int:
    return 2 * K * (P1 - 1) * (M + N)


def adam_cost(M: int, N: int, K: int, P1: int, role: Role) -> int:
    if role is Role.SERVER_ONLY:
        return P1 * M * N + P1 * K * (M + N)
    if role is Role.WORKER_ONLY:
        return K * (M + N) + M * N
    return (P1 - 1) * (M * N + K * M + K * N)


def prefers_sfb(M: int, N: int, K: int, P1: int, P2: int) -> bool:
    """The SFB-vs-PS test, evaluated in exact integer arithmetic (ties go to SFB)."""
    # 2K(P1-1)(M+N) <= 2MN(P1+P2-2)/P2, multiplied through by P2
    return 2 * K * (P1 - 1) * (M + N) * P2 <= 2 * M * N * (P1 + P2 - 2)


def best_scheme(layer: LayerSpec, model: ModelSpec, cluster: ClusterConfig) -> Scheme:
    if layer not in model.layers:
        raise ValueError(f"layer {layer.name!r} does not belong to the model")
    if layer.is_fc and prefers_sfb(layer.rows, layer.cols, model.batch_size,
                                   cluster.n_workers, cluster.n_servers):
        return Scheme.SFB
    return Scheme.PS


@dataclass(frozen=True)
class LayerPlan:
    index: int
    name: str
    scheme: Scheme
    worker_elements: int  # per-iteration elements at a worker-only node
    server_elements: int  # at a server-only node (0 for SFB)
    colocated_elements: int  # at a node that is both


@dataclass(frozen=True)
class CommPlan:
    layers: tuple[LayerPlan, ...]

    @property
    def schemes(self) -> tuple[Scheme, ...]:
        return tuple(l.scheme for l in self.layers)

    def scheme_of(self, index: int) -> Scheme:
        return self.layers[index].scheme

    @property
    def worker_total(self) -> int:
        return sum(l.worker_elements for l in self.layers)

    @property
    def server_total(self) -> int:
        return sum(l.server_elements for l in self.layers)

    @property
    def colocated_total(self) -> int:
        return sum(l.colocated_elements for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"index": l.index, "name": l.name, "scheme": l.scheme.value,
                 "worker_elements": l.worker_elements, "server_elements": l.server_elements,
                 "colocated_elements": l.colocated_elements}
                for l in self.layers
            ],
            "totals": {
                "worker_elements": self.worker_total,
                "server_elements": self.server_total,
                "colocated_elements": self.colocated_total,
                "worker_bytes": self.worker_total * ELEMENT_BYTES,
                "server_bytes": self.server_total * ELEMENT_BYTES,
                "colocated_bytes": self.colocated_total * ELEMENT_BYTES,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CommPlan":
        return cls(tuple(
            LayerPlan(e["index"], e["name"], Scheme(e["scheme"]), e["worker_elements"],
                      e["server_elements"], e["colocated_elements"])
            for e in doc["layers"]
        ))


def _layer_cost(layer: LayerSpec, scheme: Scheme, K: int, P1: int, P2: int) -> LayerPlan:
    if scheme is Scheme.SFB:
        w = sfb_cost(layer.rows, layer.cols, K, P1)
        return LayerPlan(layer.index, layer.name, scheme, w, 0, w)
    # PS cost depends on the layer size only, so opaque layers use M*N = param_count
    M, N = (layer.rows, layer.cols) if layer.is_fc else (layer.param_count, 1)
    return LayerPlan(
        layer.index, layer.name, scheme,
        ps_cost(M, N, P1, P2, Role.WORKER_ONLY),
        ps_cost(M, N, P1, P2, Role.SERVER_ONLY),
        ps_cost(M, N, P1, P2, Role.SERVER_AND_WORKER),
    )


def plan(model: ModelSpec, cluster: ClusterConfig, *, force: Scheme | None = None) -> CommPlan:
    """Pick a scheme per layer.

    ``force=Scheme.PS`` yields the pure parameter-server plan; ``force=Scheme.SFB``
    puts every FC layer on SFB (other layers stay PS).
    """
    K, P1, P2 = model.batch_size, cluster.n_workers, cluster.n_servers
    out = []
    for layer in model.layers:
        if force is None:
            scheme = best_scheme(layer, model, cluster)
        elif force is Scheme.SFB:
            scheme = Scheme.SFB if layer.is_fc else Scheme.PS
        else:
            scheme = Scheme.PS
        out.append(_layer_cost(layer, scheme, K, P1, P2))
    return CommPlan(tuple(out))


def format_plan(p: CommPlan, fmt: str = "table") -> str:
    doc = p.to_dict()
    if fmt == "json":
        return json.dumps(doc, indent=2)
    cols = ["index", "name", "scheme", "worker_elements", "server_elements", "colocated_elements"]
    rows = [[e[c] for c in cols] for e in doc["layers"]]
    totals = doc["totals"]
    total_row = ["", "TOTAL", "", totals["worker_elements"], totals["server_elements"],
                 totals["colocated_elements"]]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerows(rows)
        w.writerow(total_row)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    table = [cols] + [[str(x) for x in r] for r in rows] + [[str(x) for x in total_row]]
    widths = [max(len(r[i]) for r in table) for i in range(len(cols))]
    lines = ["  ".join(c.rjust(w) if i >= 3 else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append(f"per-node bytes: worker={totals['worker_bytes']} server={totals['server_bytes']} "
                 f"server+worker={totals['colocated_bytes']}")
    return "\n".join(lines) + "\n"
