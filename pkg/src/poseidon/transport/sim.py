"""Deterministic discrete-event network.

Each node has an egress and an ingress capacity.  Concurrent transfers share
those capacities max-min fairly (processor sharing), frames on one directed
link are transmitted one after another, and a frame is delivered ``latency``
seconds after its last byte leaves the sender.  Frames a node sends to itself
are delivered at once and never touch the interface.
"""
from __future__ import annotations

import heapq
import itertools
import json
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import _kernels
from .frame import Frame
from .meter import TrafficMeter


class TransportError(RuntimeError):
    pass


class SimDeadlock(TransportError):
    """The event queue drained before the awaited condition became true."""


@dataclass
class Delivery:
    src: int
    dst: int
    frame: Frame
    sent_at: float
    delivered_at: float | None = None


@dataclass
class _Flow:
    delivery: Delivery
    remaining: float  # bytes


@dataclass(frozen=True)
class SimConfig:
    bandwidth_mbps: float | None = None  # None or inf: transfers take no time
    latency_ms: float = 0.0
    seed: int = 0
    reorder: bool = False

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        doc = json.loads(text)
        bw = doc.get("bandwidth_mbps")
        return cls(None if bw is None else float(bw), float(doc.get("latency_ms", 0.0)),
                   int(doc.get("seed", 0)), bool(doc.get("reorder", False)))


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    action: Callable = field(compare=False)


class SimNetwork:
    def __init__(self, n_nodes: int, bandwidth_bps: float | None = None, latency_s: float = 0.0,
                 *, seed: int = 0, reorder: bool = False, meter: TrafficMeter | None = None,
                 jitter_s: float | None = None):
        self.n_nodes = n_nodes
        bw = math.inf if bandwidth_bps is None else float(bandwidth_bps)
        if bw <= 0:
            raise ValueError("bandwidth must be positive")
        self.capacity = bw / 8.0  # bytes per second, each of ingress and egress
        self.egress = np.full(n_nodes, self.capacity)
        self.ingress = np.full(n_nodes, self.capacity)
        self.latency = float(latency_s)
        self.reorder = reorder
        self.jitter = (max(self.latency, 1e-3) if jitter_s is None else jitter_s) if reorder else 0.0
        self.rng = random.Random(seed)
        self.meter = meter or TrafficMeter()
        self.now = 0.0
        self.log: list[tuple] = []
        self._handlers: dict[int, Callable[[Frame, int], None]] = {}
        self._events: list[_Event] = []
        self._seq = itertools.count()
        self._links: dict[tuple[int, int], deque[_Flow]] = {}
        self._active: list[_Flow] = []
        self._rates = np.zeros(0)
        self._last_delivery: dict[tuple[int, int], float] = {}
        self._closed: set[int] = set()
        self._partitioned: set[tuple[int, int]] = set()

    @classmethod
    def from_config(cls, n_nodes: int, cfg: SimConfig, **kw) -> "SimNetwork":
        bw = None if cfg.bandwidth_mbps is None else cfg.bandwidth_mbps * 1e6
        return cls(n_nodes, bw, cfg.latency_ms / 1e3, seed=cfg.seed, reorder=cfg.reorder, **kw)

    # -- endpoints -----------------------------------------------------------

    def register(self, node: int, handler: Callable[[Frame, int], None]) -> None:
        self._handlers[node] = handler

    def close(self, node: int) -> None:
        self._closed.add(node)

    def partition(self, a: int, b: int) -> None:
        self._partitioned.add((a, b))
        self._partitioned.add((b, a))

    # -- scheduling ----------------------------------------------------------

    def call_at(self, t: float, action: Callable[[], None]) -> None:
        heapq.heappush(self._events, _Event(max(t, self.now), next(self._seq), action))

    def call_later(self, delay: float, action: Callable[[], None]) -> None:
        self.call_at(self.now + delay, action)

    def send_frame(self, src: int, dst: int, frame: Frame, at: float | None = None) -> Delivery:
        """Queue ``frame`` on link ``src -> dst`` at time ``at`` (default: now)."""
        if src in self._closed or dst in self._closed:
            raise TransportError(f"send on closed endpoint {src}->{dst}")
        if (src, dst) in self._partitioned:
            raise TransportError(f"link {src}->{dst} is partitioned")
        t = self.now if at is None else max(at, self.now)
        d = Delivery(src, dst, frame, t)
        if t > self.now:
            self.call_at(t, lambda: self._inject(d))
        else:
            self._inject(d)
        return d

    def _inject(self, d: Delivery) -> None:
        self.meter.record(d.src, d.dst, d.frame.size, d.frame.layer)
        if d.src == d.dst or math.isinf(self.capacity):
            self._schedule_delivery(d, self.now, loopback=d.src == d.dst)
            return
        q = self._links.setdefault((d.src, d.dst), deque())
        q.append(_Flow(d, float(d.frame.size)))
        if len(q) == 1:
            self._active.append(q[0])
            self._recompute()

    def _schedule_delivery(self, d: Delivery, finished: float, loopback: bool = False) -> None:
        t = finished if loopback else finished + self.latency
        if self.jitter and not loopback:
            t += self.rng.random() * self.jitter
        link = (d.src, d.dst)
        t = max(t, self._last_delivery.get(link, 0.0))  # per-link FIFO
        self._last_delivery[link] = t
        self.call_at(t, lambda: self._deliver(d))

    def _deliver(self, d: Delivery) -> None:
        d.delivered_at = self.now
        f = d.frame
        self.log.append((self.now, d.src, d.dst, int(f.msg_type), f.layer, f.chunk_id, f.iteration, f.origin))
        handler = self._handlers.get(d.dst)
        if handler is not None:
            handler(f, d.src)

    # -- bandwidth sharing ---------------------------------------------------

    def _recompute(self) -> None:
        if not self._active:
            self._rates = np.zeros(0)
            return
        src = np.fromiter((f.delivery.src for f in self._active), dtype=np.int64, count=len(self._active))
        dst = np.fromiter((f.delivery.dst for f in self._active), dtype=np.int64, count=len(self._active))
        self._rates = _kernels.maxmin_rates(src, dst, self.egress, self.ingress)

    def _advance(self, t: float) -> None:
        dt = t - self.now
        if dt > 0 and self._active:
            for f, r in zip(self._active, self._rates):
                f.remaining -= r * dt
        self.now = t

    def _next_finish(self) -> tuple[float, int]:
        if not self._active:
            return math.inf, -1
        rem = np.fromiter((f.remaining for f in self._active), dtype=np.float64, count=len(self._active))
        eta = np.maximum(rem, 0.0) / self._rates
        i = int(np.argmin(eta))
        return self.now + float(eta[i]), i

    def _finish_flows(self, first: int) -> None:
        self._active[first].remaining = 0.0
        # flows within a relative hair of zero remaining bytes finish together
        done = [f for f in self._active if f.remaining <= 1e-9 * f.delivery.frame.size]
        for f in done:
            self._active.remove(f)
            link = (f.delivery.src, f.delivery.dst)
            q = self._links[link]
            q.popleft()
            self._schedule_delivery(f.delivery, self.now)
            if q:
                self._active.append(q[0])
        self._recompute()

    # -- driving -------------------------------------------------------------

    def step(self) -> bool:
        """Process the next event or transfer completion. False when idle."""
        t_ev = self._events[0].time if self._events else math.inf
        t_fin, first = self._next_finish()
        if math.isinf(t_ev) and math.isinf(t_fin):
            return False
        if t_fin <= t_ev:
            self._advance(t_fin)
            self._finish_flows(first)
        else:
            self._advance(t_ev)
            ev = heapq.heappop(self._events)
            ev.action()
        return True

    def run(self, until: float | None = None) -> float:
        while True:
            if until is not None:
                t_ev = self._events[0].time if self._events else math.inf
                if min(t_ev, self._next_finish()[0]) > until:
                    self._advance(until)
                    break
            if not self.step():
                break
        return self.now

    def run_until(self, pred: Callable[[], bool], timeout: float | None = None) -> None:
        deadline = None if timeout is None else self.now + timeout
        while not pred():
            if deadline is not None:
                t_ev = self._events[0].time if self._events else math.inf
                if min(t_ev, self._next_finish()[0]) > deadline:
                    self._advance(deadline)
                    raise TimeoutError("simulated wait timed out")
            if not self.step():
                raise SimDeadlock("network idle but condition not met")

    def wait_until(self, pred: Callable[[], bool], timeout: float | None = None) -> None:
        self.run_until(pred, timeout)

    @property
    def idle(self) -> bool:
        return not self._events and not self._active


class _NoLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def notify_all(self):
        pass


class SimEndpoint:
    """One node's view of a shared :class:`SimNetwork`, shaped like ``TcpTransport``."""

    def __init__(self, net: SimNetwork, node_id: int):
        self.net = net
        self.node_id = node_id
        self.cond = _NoLock()

    @property
    def meter(self) -> TrafficMeter:
        return self.net.meter

    def register(self, handler: Callable[[Frame, int], None]) -> None:
        self.net.register(self.node_id, handler)

    def send_frame(self, src: int, dst: int, frame: Frame, at: float | None = None) -> Delivery:
        if src != self.node_id:
            raise TransportError(f"node {self.node_id} cannot send as {src}")
        return self.net.send_frame(src, dst, frame, at)

    def call_later(self, delay: float, action: Callable[[], None]) -> None:
        self.net.call_later(delay, action)

    def wait_until(self, pred: Callable[[], bool], timeout: float | None = None) -> None:
        self.net.run_until(pred, timeout)

    def now(self) -> float:
        return self.net.now

    def close(self) -> None:
        self.net.close(self.node_id)
