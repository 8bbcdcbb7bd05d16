"""Scenario runner for throughput scaling and per-node traffic, written as CSV."""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .modelspec import ClusterConfig, ModelSpec, load_model, parse_model
from .syncer import MODES
from .timeline import ComputeProfile, simulate_iterations
from .transport import TrafficMeter

SCALING_COLUMNS = ("mode", "P1", "bandwidth", "images_per_sec", "speedup", "stall_ratio", "error")
LOADBAL_COLUMNS = ("strategy", "node", "role", "bytes_in", "bytes_out", "total")
LOADBAL_STRATEGIES = {"chunked-ps": "ps", "adam": "adam", "hybrid": "hybrid"}


@dataclass
class Scenario:
    model: ModelSpec
    cluster_sizes: list[int]
    bandwidths: list[float | None]  # Mbit/s; None is unlimited
    modes: list[str]
    iterations: int = 1
    seed: int = 0
    latency_ms: float = 0.0
    chunk_bytes: int | None = None
    n_servers: int | None = None  # default: one shard per worker node
    compute: ComputeProfile | None = None
    ms_per_mparam: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("scenario iterations must be >= 1")
        if not self.modes:
            raise ValueError("scenario needs at least one mode")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}; expected a subset of {list(MODES)}")
        if not self.cluster_sizes or min(self.cluster_sizes) < 1:
            raise ValueError("cluster sizes must be positive")

    @property
    def profile(self) -> ComputeProfile:
        return self.compute or ComputeProfile.proportional(self.model, self.ms_per_mparam)

    def cluster(self, n_workers: int) -> ClusterConfig:
        kw = {} if self.chunk_bytes is None else {"chunk_bytes": self.chunk_bytes}
        return ClusterConfig.colocated(n_workers, n_servers=self.n_servers or n_workers, **kw)

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None) -> "Scenario":
        m = doc["model"]
        if isinstance(m, str):
            model = load_model((base or Path(".")) / m)
        else:
            model = parse_model(json.dumps(m))
        compute = None
        if "compute_ms" in doc:
            c = doc["compute_ms"]
            compute = ComputeProfile.from_ms(c["fwd"], c["bwd"])
        bws = doc.get("bandwidths_mbps", [None])
        return cls(model, list(doc.get("cluster_sizes", [1])),
                   [None if b is None else float(b) for b in bws],
                   list(doc.get("modes", ["hybrid"])), int(doc.get("iterations", 1)),
                   int(doc.get("seed", 0)), float(doc.get("latency_ms", 0.0)), doc.get("chunk_bytes"),
                   doc.get("n_servers"), compute, float(doc.get("ms_per_mparam", 1.0)))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)


def _bps(mbps: float | None) -> float | None:
    return None if mbps is None else mbps * 1e6


def run_scaling(scn: Scenario) -> list[dict]:
    """One row per (mode, bandwidth, P1); speedup is relative to P1=1 of the same mode and bandwidth."""
    rows = []
    for mode in scn.modes:
        for bw in scn.bandwidths:
            base = None
            for p in sorted(set(scn.cluster_sizes) | {1}):
                row = {"mode": mode, "P1": p, "bandwidth": "inf" if bw is None else bw,
                       "images_per_sec": "", "speedup": "", "stall_ratio": "", "error": ""}
                try:
                    r = simulate_iterations(scn.model, scn.cluster(p), mode, bandwidth_bps=_bps(bw),
                                            latency_s=scn.latency_ms / 1e3, profile=scn.profile,
                                            iterations=scn.iterations, seed=scn.seed)
                except (ValueError, RuntimeError) as e:
                    row["error"] = str(e)
                    if p in scn.cluster_sizes:
                        rows.append(row)
                    continue
                if p == 1:
                    base = r.throughput
                row.update(images_per_sec=r.throughput, speedup=r.throughput / base if base else "",
                           stall_ratio=r.stall_ratio)
                if p in scn.cluster_sizes:
                    rows.append(row)
    return rows


def run_load_balance(scn: Scenario, n_workers: int | None = None) -> list[dict]:
    """Per-node bytes for one iteration under chunked PS, Adam and hybrid."""
    p = n_workers or max(scn.cluster_sizes)
    cluster = scn.cluster(p)
    bw = scn.bandwidths[0] if scn.bandwidths else None
    rows = []
    for name, mode in LOADBAL_STRATEGIES.items():
        meter = TrafficMeter()
        simulate_iterations(scn.model, cluster, mode, bandwidth_bps=_bps(bw), latency_s=scn.latency_ms / 1e3,
                            profile=scn.profile, iterations=1, seed=scn.seed, meter=meter)
        workers = {cluster.node_of_worker(r) for r in range(cluster.n_workers)}
        servers = {cluster.node_of_server(r) for r in range(cluster.n_servers)}
        for n, ep in enumerate(cluster.nodes):
            role = "+".join(x for x, on in (("worker", n in workers), ("server", n in servers)) if on)
            rows.append({"strategy": name, "node": n, "role": role, "bytes_in": meter.bytes_in[n],
                         "bytes_out": meter.bytes_out[n], "total": meter.total(n)})
    return rows


def summarize_load_balance(rows: list[dict]) -> dict[str, dict]:
    out = {}
    for name in LOADBAL_STRATEGIES:
        totals = [r["total"] for r in rows if r["strategy"] == name]
        out[name] = {"max": max(totals), "min": min(totals), "median": statistics.median(totals)}
    return out


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
