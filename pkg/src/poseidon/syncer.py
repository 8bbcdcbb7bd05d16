"""Per-layer synchronization agents.

One :class:`Syncer` per layer owns that layer's outgoing update and incoming
parameters and walks ``Idle -> Sent -> Received -> Applied``.  The owning
worker supplies the transport, the chunk table and the engine weights.
"""
from __future__ import annotations

import enum
from typing import TYPE_CHECKING

import numpy as np

from . import baselines
from .engine import LayerGrad, descent_step
from .errors import ProtocolError, SyncStateError
from .modelspec import ClusterConfig, LayerSpec, ModelSpec
from .planner import CommPlan, Scheme, plan as make_plan
from .sfb import SFBatch, SFInbox, broadcast
from .transport.frame import Frame, MsgType

if TYPE_CHECKING:
    from .runtime import Worker


class Route(str, enum.Enum):
    PS = "ps"
    SFB = "sfb"
    ADAM = "adam"
    ONEBIT = "onebit"


MODES = ("hybrid", "ps", "sfb", "sequential-ps", "adam", "onebit")

_FORCE = {"hybrid": None, "ps": Scheme.PS, "sequential-ps": Scheme.PS, "sfb": Scheme.SFB,
          "adam": Scheme.PS, "onebit": Scheme.PS}


def routes_for_mode(model: ModelSpec, cluster: ClusterConfig, mode: str) -> tuple[CommPlan, tuple[Route, ...]]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    p = make_plan(model, cluster, force=_FORCE[mode])
    routes = []
    for layer, lp in zip(model.layers, p.layers):
        if mode == "adam" and layer.is_fc:
            routes.append(Route.ADAM)
        elif mode == "onebit" and layer.is_fc:
            routes.append(Route.ONEBIT)
        else:
            routes.append(Route.SFB if lp.scheme is Scheme.SFB else Route.PS)
    return p, tuple(routes)


def schedule_for_mode(mode: str) -> str:
    return "sequential" if mode == "sequential-ps" else "wfbp"


def chunked_layers(routes) -> set[int]:
    """Layers whose parameters live in KV chunks."""
    return {i for i, r in enumerate(routes) if r in (Route.PS, Route.ONEBIT)}


ADAM_FLAG = 1 << 63


def adam_chunk_id(layer: int) -> int:
    return ADAM_FLAG | layer


def adam_server(layer: int, n_servers: int) -> int:
    """Shard holding the whole matrix of an FC layer under the Adam route."""
    return layer % n_servers


class SyncState(str, enum.Enum):
    IDLE = "Idle"
    SENT = "Sent"
    RECEIVED = "Received"
    APPLIED = "Applied"


class Direction(str, enum.Enum):
    ENGINE_TO_SYNCER = "engine->syncer"
    SYNCER_TO_ENGINE = "syncer->engine"


class IterationClock:
    """Completion vector: one bit per syncer, cleared at each iteration start."""

    def __init__(self, n_syncers: int):
        self.iteration = 0
        self.bits = np.zeros(n_syncers, dtype=bool)

    def reset(self, iteration: int) -> None:
        if iteration != 0 and not self.bits.all():
            raise SyncStateError("iteration advanced before every syncer finished")
        self.iteration = iteration
        self.bits[:] = False

    def set(self, layer: int) -> None:
        self.bits[layer] = True

    @property
    def sync_count(self) -> int:
        return int(self.bits.sum())

    def all_set(self) -> bool:
        return bool(self.bits.all())


class Syncer:
    def __init__(self, worker: "Worker", layer: LayerSpec, route: Route):
        self.worker = worker
        self.layer = layer
        self.index = layer.index
        self.route = route
        self.state = SyncState.IDLE
        self.iteration = 0
        self.shape = (layer.rows, layer.cols)
        self.layer_start = worker.offsets[layer.index].start
        self.chunks = worker.book.chunks.of_layer(layer.index) if route in (Route.PS, Route.ONEBIT) else []
        self.staging = None
        self.own_batch: SFBatch | None = None
        self.fresh: dict[int, tuple[int, np.ndarray]] = {}
        self.sf_pending: dict[int, dict[int, SFBatch]] = {}
        self.inbox = SFInbox(layer.index, self.shape)
        self.quant = baselines.QuantState(self.shape) if route is Route.ONEBIT else None
        self.received_at: float | None = None

    # -- bookkeeping ---------------------------------------------------------

    def start_iteration(self, t: int) -> None:
        if self.state not in (SyncState.IDLE, SyncState.APPLIED):
            raise SyncStateError(f"layer {self.index}: new iteration while {self.state.value}")
        self.state = SyncState.IDLE
        self.iteration = t
        self.inbox.advance(t)
        self.staging = None
        self.own_batch = None
        self.received_at = None

    def _expect(self, *states: SyncState) -> None:
        if self.state not in states:
            raise SyncStateError(
                f"layer {self.index}: operation needs state {'/'.join(s.value for s in states)}, "
                f"syncer is {self.state.value}")

    # -- delivery from the transport (called with the node lock held) --------

    def deliver_chunk(self, chunk_id: int, iteration: int, values: np.ndarray) -> None:
        if chunk_id in self.fresh and self.fresh[chunk_id][0] >= iteration:
            raise ProtocolError(f"layer {self.index}: duplicate/stale broadcast of chunk {chunk_id}")
        self.fresh[chunk_id] = (iteration, values)
        self._note_arrival()

    def deliver_sf(self, batch: SFBatch) -> None:
        if batch.iteration < self.iteration or (batch.iteration == self.iteration and
                                                self.state is SyncState.APPLIED):
            raise ProtocolError(f"layer {self.index}: stale SF batch for iteration {batch.iteration}")
        pending = self.sf_pending.setdefault(batch.iteration, {})
        if batch.origin in pending:
            raise ProtocolError(f"layer {self.index}: duplicate SF batch from worker {batch.origin}")
        pending[batch.origin] = batch
        self._note_arrival()

    def _note_arrival(self) -> None:
        if self.received_at is None and self.complete():
            self.received_at = self.worker.endpoint.now()

    def complete(self) -> bool:
        """All inbound data for the current iteration is present."""
        t = self.iteration
        if self.route is Route.SFB:
            return len(self.sf_pending.get(t, ())) == len(self.worker.peer_nodes)
        if self.route is Route.ADAM:
            got = self.fresh.get(adam_chunk_id(self.index))
            return got is not None and got[0] == t
        return all(c.chunk_id in self.fresh and self.fresh[c.chunk_id][0] == t for c in self.chunks)

    # -- Table-2 style API ----------------------------------------------------

    def move(self, direction: Direction, grad: LayerGrad | None = None) -> None:
        w = self.worker
        if direction is Direction.ENGINE_TO_SYNCER:
            self._expect(SyncState.IDLE)
            if grad is None or grad.layer != self.index:
                raise SyncStateError(f"layer {self.index}: move out needs this layer's gradient")
            if grad.u.shape[1] != self.shape[0] or grad.v.shape[1] != self.shape[1]:
                raise ValueError(f"layer {self.index}: gradient factors do not match {self.shape}")
            if self.route in (Route.SFB, Route.ADAM):
                u = (grad.u * w.coef).astype(np.float32, copy=False)
                self.own_batch = SFBatch(self.index, self.iteration, w.rank, u,
                                         grad.v.astype(np.float32, copy=False))
            elif self.route is Route.ONEBIT:
                step = descent_step(grad.u, grad.v, w.coef)
                self.staging = baselines.quantize_1bit(step, self.quant)[0]
            else:
                self.staging = descent_step(grad.u, grad.v, w.coef).reshape(-1)
            return
        # syncer -> engine
        self._expect(SyncState.RECEIVED)
        weights = w.net.weights[self.index]
        if self.route is Route.SFB:
            batches = dict(self.sf_pending.pop(self.iteration, {}))
            batches[w.rank] = self.own_batch
            for origin in sorted(batches):  # canonical order keeps replicas bitwise equal
                self.inbox.apply_remote(batches[origin], weights)
        elif self.route is Route.ADAM:
            _, values = self.fresh.pop(adam_chunk_id(self.index))
            weights[...] = values.reshape(self.shape)
        else:
            flat = weights.reshape(-1)
            for c in self.chunks:
                _, values = self.fresh.pop(c.chunk_id)
                lo = c.start - self.layer_start
                flat[lo:lo + c.length] = values
        self.state = SyncState.APPLIED
        w.clock.set(self.index)

    def send(self) -> None:
        self._expect(SyncState.IDLE)
        w = self.worker
        t = self.iteration
        if self.route is Route.SFB:
            if self.own_batch is None:
                raise SyncStateError(f"layer {self.index}: nothing staged")
            broadcast(self.own_batch, w.peer_nodes, w.endpoint, src=w.node)
        elif self.route is Route.ADAM:
            from .sfb import encode_payload
            node = w.server_node(adam_server(self.index, w.cluster.n_servers))
            w.endpoint.send_frame(w.node, node, Frame(
                MsgType.SF_BATCH, self.index, adam_chunk_id(self.index), t, w.rank,
                encode_payload(self.own_batch)))
        elif self.route is Route.ONEBIT:
            q = self.staging
            for c in self.chunks:
                lo = c.start - self.layer_start
                payload = baselines.encode_onebit_chunk(q, lo, c.length)
                w.endpoint.send_frame(w.node, w.server_node(c.server), Frame(
                    MsgType.ONEBIT_PUSH_CHUNK, self.index, c.chunk_id, t, w.rank, payload))
        else:
            if self.staging is None:
                raise SyncStateError(f"layer {self.index}: nothing staged")
            for c in self.chunks:
                lo = c.start - self.layer_start
                payload = self.staging[lo:lo + c.length].astype("<f4", copy=False).tobytes()
                w.endpoint.send_frame(w.node, w.server_node(c.server), Frame(
                    MsgType.PUSH_CHUNK, self.index, c.chunk_id, t, w.rank, payload))
        self.state = SyncState.SENT

    def receive(self, timeout: float | None = None) -> None:
        """Block until this layer's fresh parameters / peer factors are all in.

        The caller holds the worker's node lock.
        """
        self._expect(SyncState.SENT)
        self.worker.endpoint.wait_until(lambda: self.complete() or bool(self.worker.errors), timeout)
        if self.worker.errors:
            raise self.worker.errors[0]
        if self.received_at is None:
            self.received_at = self.worker.endpoint.now()
        self.state = SyncState.RECEIVED
