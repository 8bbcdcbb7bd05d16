"""Iteration timing on the simulated network.

Workers are modeled as a compute chain (forward layers bottom-up, backward
top-down, fixed milliseconds per layer) and the synchronization protocol is
replayed with size-only frames of the exact wire sizes.  Forward of layer
``l`` in iteration ``t+1`` waits for that layer's update from iteration ``t``
(for the sequential schedule, for every layer's update).
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

from .baselines import onebit_payload_size
from .kvstore import partition
from .modelspec import ELEMENT_BYTES, ClusterConfig, ModelSpec
from .sfb import payload_size
from .syncer import Route, adam_chunk_id, adam_server, chunked_layers, routes_for_mode, schedule_for_mode
from .transport import Frame, MsgType, SimNetwork, TrafficMeter


@dataclass(frozen=True)
class ComputeProfile:
    """Per-layer forward and backward time in seconds."""

    fwd: tuple[float, ...]
    bwd: tuple[float, ...]

    @property
    def total(self) -> float:
        return sum(self.fwd) + sum(self.bwd)

    @classmethod
    def proportional(cls, model: ModelSpec, ms_per_mparam: float = 1.0) -> "ComputeProfile":
        """Time proportional to parameter count, a third forward and two thirds backward."""
        per = [ms_per_mparam * l.param_count / 1e6 / 1e3 for l in model.layers]
        return cls(tuple(p / 3 for p in per), tuple(2 * p / 3 for p in per))

    @classmethod
    def from_ms(cls, fwd_ms, bwd_ms) -> "ComputeProfile":
        if len(fwd_ms) != len(bwd_ms):
            raise ValueError("forward and backward times need one entry per layer each")
        return cls(tuple(f / 1e3 for f in fwd_ms), tuple(b / 1e3 for b in bwd_ms))


@dataclass
class TimelineResult:
    makespan: float
    compute: float  # per worker, all iterations
    iterations: int
    n_workers: int
    batch_size: int
    meter: TrafficMeter
    applied: dict = field(default_factory=dict)  # (worker, layer, iteration) -> time

    @property
    def throughput(self) -> float:
        """Samples per second over all workers."""
        if self.makespan <= 0:
            return math.inf
        return self.n_workers * self.batch_size * self.iterations / self.makespan

    @property
    def stall(self) -> float:
        return max(self.makespan - self.compute, 0.0)

    @property
    def stall_ratio(self) -> float:
        total = self.stall + self.compute
        return self.stall / total if total > 0 else 0.0


def _check_feasible(model: ModelSpec, mode: str) -> None:
    if mode in ("sfb", "adam", "onebit") and not any(l.is_fc for l in model.layers):
        raise ValueError(f"mode {mode!r} needs at least one fully-connected layer")


class _Emulation:
    def __init__(self, model: ModelSpec, cluster: ClusterConfig, mode: str, net: SimNetwork):
        _check_feasible(model, mode)
        self.model = model
        self.cluster = cluster
        self.net = net
        self.K = model.batch_size
        self.P1 = cluster.n_workers
        _, self.routes = routes_for_mode(model, cluster, mode)
        self.chunks = partition(model, cluster, layers=chunked_layers(self.routes))
        self.layer_chunks = {l: self.chunks.of_layer(l) for l in range(model.num_layers)}
        self.worker_nodes = [cluster.node_of_worker(r) for r in range(self.P1)]
        self.server_counts: dict = defaultdict(int)
        self.inbound: dict = defaultdict(int)
        self.applied: dict = {}
        self.on_apply = None
        for n in range(net.n_nodes):
            net.register(n, self._handler(n))

    # sizes
    def _needed(self, layer: int) -> int:
        r = self.routes[layer]
        if r is Route.SFB:
            return self.P1 - 1
        if r is Route.ADAM:
            return 1
        return len(self.layer_chunks[layer])

    def send_layer(self, rank: int, layer: int, t: int) -> None:
        spec = self.model.layers[layer]
        r = self.routes[layer]
        src = self.worker_nodes[rank]
        if r is Route.SFB:
            size = payload_size(self.K, spec.rows, spec.cols)
            for q, dst in enumerate(self.worker_nodes):
                if q != rank:
                    self.net.send_frame(src, dst, Frame(MsgType.SF_BATCH, layer, 0, t, rank, None, size))
            if self.P1 == 1:
                self._apply(rank, layer, t)
        elif r is Route.ADAM:
            shard = self.cluster.node_of_server(adam_server(layer, self.cluster.n_servers))
            size = payload_size(self.K, spec.rows, spec.cols)
            self.net.send_frame(src, shard, Frame(MsgType.SF_BATCH, layer, adam_chunk_id(layer), t, rank,
                                                  None, size))
        else:
            onebit = r is Route.ONEBIT
            for c in self.layer_chunks[layer]:
                size = onebit_payload_size(spec.cols, c.length) if onebit else c.length * ELEMENT_BYTES
                mt = MsgType.ONEBIT_PUSH_CHUNK if onebit else MsgType.PUSH_CHUNK
                self.net.send_frame(src, self.cluster.node_of_server(c.server),
                                    Frame(mt, layer, c.chunk_id, t, rank, None, size))

    def _handler(self, node: int):
        def handle(frame: Frame, src: int) -> None:
            mt = frame.msg_type
            if mt in (MsgType.PUSH_CHUNK, MsgType.ONEBIT_PUSH_CHUNK):
                key = (frame.chunk_id, frame.iteration)
                self.server_counts[key] += 1
                if self.server_counts[key] == self.P1:
                    size = self.chunks[frame.chunk_id].length * ELEMENT_BYTES
                    self._broadcast(node, frame, size)
            elif mt is MsgType.SF_BATCH and frame.chunk_id:
                key = (frame.chunk_id, frame.iteration)
                self.server_counts[key] += 1
                if self.server_counts[key] == self.P1:
                    self._broadcast(node, frame, self.model.layers[frame.layer].param_count * ELEMENT_BYTES)
            else:  # broadcast chunk, matrix or peer SF batch arriving at a worker
                rank = self.worker_nodes.index(node)
                key = (rank, frame.layer, frame.iteration)
                self.inbound[key] += 1
                if self.inbound[key] == self._needed(frame.layer):
                    self._apply(rank, frame.layer, frame.iteration)
        return handle

    def _broadcast(self, node: int, frame: Frame, size: int) -> None:
        out = Frame(MsgType.BROADCAST_CHUNK, frame.layer, frame.chunk_id, frame.iteration, 0, None, size)
        for dst in self.worker_nodes:
            self.net.send_frame(node, dst, out)

    def _apply(self, rank: int, layer: int, t: int) -> None:
        self.applied[rank, layer, t] = self.net.now
        if self.on_apply is not None:
            self.on_apply(rank, layer, t)


class _Engine:
    """Compute chain of one worker."""

    def __init__(self, emu: _Emulation, rank: int, profile: ComputeProfile, iterations: int, schedule: str):
        self.emu, self.rank, self.profile = emu, rank, profile
        self.iterations, self.schedule = iterations, schedule
        self.L = emu.model.num_layers
        self.waiting: tuple[int, int] | None = None

    def start(self) -> None:
        self._forward(0, 0)

    def _ready(self, t: int, l: int) -> bool:
        if t == 0:
            return True
        applied = self.emu.applied
        if self.schedule == "sequential":  # the whole model syncs before the next pass starts
            return all((self.rank, j, t - 1) in applied for j in range(self.L))
        return (self.rank, l, t - 1) in applied

    def _forward(self, t: int, l: int) -> None:
        if not self._ready(t, l):
            self.waiting = (t, l)
            return
        self.waiting = None
        self.emu.net.call_later(self.profile.fwd[l], lambda: self._after_forward(t, l))

    def _after_forward(self, t: int, l: int) -> None:
        if l + 1 < self.L:
            self._forward(t, l + 1)
        else:
            self._backward(t, self.L - 1)

    def _backward(self, t: int, l: int) -> None:
        self.emu.net.call_later(self.profile.bwd[l], lambda: self._after_backward(t, l))

    def _after_backward(self, t: int, l: int) -> None:
        if self.schedule == "wfbp":
            self.emu.send_layer(self.rank, l, t)
        if l > 0:
            self._backward(t, l - 1)
            return
        if self.schedule == "sequential":
            for j in reversed(range(self.L)):
                self.emu.send_layer(self.rank, j, t)
        if t + 1 < self.iterations:
            self._forward(t + 1, 0)

    def applied(self, layer: int, t: int) -> None:
        if self.waiting is not None and self.waiting[0] == t + 1 and self._ready(*self.waiting):
            self._forward(*self.waiting)


def _network(cluster: ClusterConfig, bandwidth_bps, latency_s, seed, meter) -> SimNetwork:
    return SimNetwork(len(cluster.nodes), bandwidth_bps, latency_s, seed=seed, meter=meter)


def simulate_iterations(model: ModelSpec, cluster: ClusterConfig, mode: str, *,
                        bandwidth_bps: float | None = None, latency_s: float = 0.0,
                        profile: ComputeProfile | None = None, iterations: int = 1,
                        seed: int = 0, meter: TrafficMeter | None = None) -> TimelineResult:
    """Makespan of ``iterations`` training iterations of every worker."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    profile = profile or ComputeProfile.proportional(model)
    if len(profile.fwd) != model.num_layers:
        raise ValueError(f"compute profile has {len(profile.fwd)} layers, model has {model.num_layers}")
    meter = meter or TrafficMeter()
    net = _network(cluster, bandwidth_bps, latency_s, seed, meter)
    emu = _Emulation(model, cluster, mode, net)
    engines = [_Engine(emu, r, profile, iterations, schedule_for_mode(mode)) for r in range(cluster.n_workers)]
    emu.on_apply = lambda rank, layer, t: engines[rank].applied(layer, t)
    for e in engines:
        e.start()
    net.run()
    expected = cluster.n_workers * model.num_layers * iterations
    if len(emu.applied) != expected:
        raise RuntimeError(f"timeline stalled: {len(emu.applied)} of {expected} layer updates applied")
    return TimelineResult(max(emu.applied.values()), iterations * profile.total, iterations,
                          cluster.n_workers, model.batch_size, meter, dict(emu.applied))


def isolated_sync_time(model: ModelSpec, cluster: ClusterConfig, mode: str, layer: int, *,
                       bandwidth_bps: float | None = None, latency_s: float = 0.0, seed: int = 0) -> float:
    """Time for one layer's synchronization when every worker sends it at once on an idle network."""
    net = _network(cluster, bandwidth_bps, latency_s, seed, TrafficMeter())
    emu = _Emulation(model, cluster, mode, net)
    for r in range(cluster.n_workers):
        emu.send_layer(r, layer, 0)
    net.run()
    return max(v for (r, l, t), v in emu.applied.items() if l == layer)
