"""Worker and server roles on one node, and the distributed training driver.

A node hosts a worker, a server shard, or both.  Every inbound frame is
dispatched by message type; SF batches carrying the Adam flag in their chunk id
go to the shard, all other SF batches are peer broadcasts for the worker.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .coordinator import InformationBook, assign_ports, bootstrap
from .engine import (MLP, Dataset, LayerGrad, WorkerData, make_synthetic_dataset, parse_dataset_arg,
                     step_coefficient)
from .errors import ProtocolError, StaleUpdateError
from .kvstore import KVShard, partition
from .modelspec import ClusterConfig, ModelSpec
from .planner import CommPlan, Scheme
from .sfb import decode_payload
from .syncer import (ADAM_FLAG, Direction, IterationClock, Route, Syncer, adam_chunk_id, adam_server,
                     chunked_layers, schedule_for_mode)
from .transport import Frame, MsgType, SimConfig, SimEndpoint, SimNetwork, TcpTransport, TrafficMeter

log = logging.getLogger(__name__)


def _f32(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f4")


@dataclass
class IterationMetrics:
    iteration: int
    wall_ms: float
    loss: float
    bytes_in: int
    bytes_out: int
    stall_ms: float
    compute_ms: float

    COLUMNS = ("iteration", "wall_ms", "loss", "bytes_in", "bytes_out", "stall_ms", "compute_ms")

    def row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


class Worker:
    def __init__(self, book: InformationBook, rank: int, endpoint, data: WorkerData, *,
                 lr: float, seed: int, schedule: str = "wfbp", pool_size: int = 4,
                 timeout: float | None = 60.0):
        if schedule not in ("wfbp", "sequential"):
            raise ValueError(f"unknown schedule {schedule!r}")
        self.book = book
        self.cluster = book.cluster
        self.rank = rank
        self.node = book.cluster.node_of_worker(rank)
        self.endpoint = endpoint
        self.data = data
        self.schedule = schedule
        self.timeout = timeout
        self.net = MLP(book.model, seed)
        self.coef = step_coefficient(lr, book.model.batch_size, book.cluster.n_workers)
        self.offsets = book.offsets
        self.peer_nodes = [book.cluster.node_of_worker(r) for r in range(book.cluster.n_workers) if r != rank]
        self.errors: list[BaseException] = getattr(endpoint, "errors", [])
        self.clock = IterationClock(book.model.num_layers)
        self.syncers = [Syncer(self, layer, route) for layer, route in zip(book.model.layers, book.routes)]
        self.pool = (ThreadPoolExecutor(max(1, min(book.model.num_layers, pool_size)),
                                        thread_name_prefix=f"sync{rank}")
                     if isinstance(endpoint, TcpTransport) else None)
        self.metrics: list[IterationMetrics] = []
        self.iteration = 0

    def server_node(self, server_rank: int) -> int:
        return self.cluster.node_of_server(server_rank)

    # -- inbound ------------------------------------------------------------

    def on_broadcast(self, frame: Frame) -> None:
        values = _f32(frame.payload)
        if frame.chunk_id & ADAM_FLAG:
            layer = frame.chunk_id & ~ADAM_FLAG
            syncer = self.syncers[layer]
            if syncer.route is not Route.ADAM or values.size != syncer.layer.param_count:
                raise ProtocolError(f"unexpected matrix broadcast for layer {layer}")
        else:
            if frame.chunk_id >= len(self.book.chunks):
                raise ProtocolError(f"unknown chunk {frame.chunk_id}")
            chunk = self.book.chunks[frame.chunk_id]
            if values.size != chunk.length:
                raise ProtocolError(f"chunk {chunk.chunk_id}: {values.size} values, expected {chunk.length}")
            syncer = self.syncers[chunk.layer]
        syncer.deliver_chunk(frame.chunk_id, frame.iteration, values)

    def on_sf_batch(self, frame: Frame) -> None:
        if frame.layer >= len(self.syncers) or self.syncers[frame.layer].route is not Route.SFB:
            raise ProtocolError(f"SF batch for non-SFB layer {frame.layer}")
        self.syncers[frame.layer].deliver_sf(
            decode_payload(frame.payload, frame.layer, frame.iteration, frame.origin))

    # -- sync jobs ------------------------------------------------------------

    def sync_out(self, grad: LayerGrad) -> None:
        with self.endpoint.cond:
            s = self.syncers[grad.layer]
            s.move(Direction.ENGINE_TO_SYNCER, grad)
            s.send()

    def sync_in(self, layer: int) -> None:
        with self.endpoint.cond:
            s = self.syncers[layer]
            s.receive(self.timeout)
            s.move(Direction.SYNCER_TO_ENGINE)
            self.endpoint.cond.notify_all()

    def sync(self, grad: LayerGrad) -> None:
        self.sync_out(grad)
        self.sync_in(grad.layer)

    def sync_out_all(self, grads: list[LayerGrad]) -> None:
        for g in reversed(grads):
            self.sync_out(g)

    def sync_in_all(self) -> None:
        for l in reversed(range(len(self.syncers))):
            self.sync_in(l)

    # -- one iteration --------------------------------------------------------

    def begin(self, t: int) -> None:
        with self.endpoint.cond:
            self.clock.reset(t)
            for s in self.syncers:
                s.start_iteration(t)
        self.iteration = t

    def compute_and_send(self, t: int):
        """Forward and backward; sends go out as each layer finishes (WFBP) or after the pass."""
        x, y = self.data.batch(t)
        ctx = self.net.forward(x, y)
        futures = []
        if self.schedule == "sequential":
            grads = self.net.backward(ctx)
        elif self.pool is not None:
            grads = self.net.backward(ctx, lambda g: futures.append(self.pool.submit(self.sync, g)))
        else:
            grads = self.net.backward(ctx, self.sync_out)
        return ctx.loss, grads, futures

    def run_iteration(self, t: int) -> float:
        """One full iteration on a threaded transport; returns the local loss."""
        before_in, before_out = self._bytes()
        t0 = time.perf_counter()
        self.begin(t)
        loss, grads, futures = self.compute_and_send(t)
        t1 = time.perf_counter()
        if self.schedule == "sequential":
            baselines.sequential_ps_sync(self, grads)
        for f in futures:
            f.result()
        with self.endpoint.cond:
            self.endpoint.wait_until(lambda: self.clock.all_set(), self.timeout)
        self.record(t, loss, t0, t1, time.perf_counter(), before_in, before_out)
        return loss

    def _bytes(self) -> tuple[int, int]:
        m = self.endpoint.meter
        return m.bytes_in[self.node], m.bytes_out[self.node]

    def record(self, t, loss, t0, t1, t2, before_in, before_out) -> None:
        now_in, now_out = self._bytes()
        self.metrics.append(IterationMetrics(
            t, (t2 - t0) * 1e3, loss, now_in - before_in, now_out - before_out,
            (t2 - t1) * 1e3, (t1 - t0) * 1e3))

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown(wait=True)


@dataclass
class _AdamSlot:
    layer: int
    weights: np.ndarray
    iteration: int = 0
    pending: dict = field(default_factory=dict)


class Server:
    def __init__(self, book: InformationBook, rank: int, endpoint, initial: list[np.ndarray], *,
                 straggler_timeout: float | None = None):
        self.book = book
        self.rank = rank
        self.node = book.cluster.node_of_server(rank)
        self.endpoint = endpoint
        self.n_workers = book.cluster.n_workers
        self.worker_nodes = [book.cluster.node_of_worker(r) for r in range(self.n_workers)]
        flat = np.concatenate([w.reshape(-1) for w in initial]).astype(np.float32)
        self.shard = KVShard(book.chunks.of_server(rank), flat, self.n_workers)
        self.adam = {l: _AdamSlot(l, initial[l].astype(np.float32).copy())
                     for l, r in enumerate(book.routes)
                     if r is Route.ADAM and adam_server(l, book.cluster.n_servers) == rank}
        self.straggler_timeout = straggler_timeout

    def _send_all(self, frame: Frame) -> None:
        for n in self.worker_nodes:
            self.endpoint.send_frame(self.node, n, frame)

    def on_push(self, frame: Frame) -> None:
        if frame.chunk_id not in self.shard.chunks:
            raise ProtocolError(f"server {self.rank} does not hold chunk {frame.chunk_id}")
        chunk = self.shard.chunks[frame.chunk_id]
        if frame.msg_type is MsgType.ONEBIT_PUSH_CHUNK:
            delta = baselines.decode_onebit_chunk(frame.payload, chunk.length)
        else:
            delta = _f32(frame.payload)
        first = not chunk.applied
        if not self.shard.receive_update(frame.chunk_id, frame.iteration, delta, frame.origin):
            return
        if first and self.straggler_timeout is not None and self.n_workers > 1:
            cid, it = frame.chunk_id, frame.iteration
            self.endpoint.call_later(self.straggler_timeout, lambda: self._deadline(cid, it))
        self._maybe_broadcast(frame.chunk_id, frame.layer)

    def _maybe_broadcast(self, chunk_id: int, layer: int) -> None:
        msg = self.shard.maybe_broadcast(chunk_id)
        if msg is not None:
            self._send_all(Frame(MsgType.BROADCAST_CHUNK, layer, chunk_id, msg.iteration, self.rank,
                                 msg.values.astype("<f4", copy=False).tobytes()))

    def _deadline(self, chunk_id: int, iteration: int) -> None:
        chunk = self.shard.chunks[chunk_id]
        if chunk.iteration != iteration:
            return
        late = self.shard.missing(chunk_id, range(self.n_workers))
        for w in late:
            self.shard.drop_worker(chunk_id, w)
        if late:
            log.warning("server %d: dropped stragglers %s on chunk %d iteration %d",
                        self.rank, late, chunk_id, iteration)
        self._maybe_broadcast(chunk_id, self.book.chunks[chunk_id].layer)

    def on_adam_batch(self, frame: Frame) -> None:
        layer = frame.chunk_id & ~ADAM_FLAG
        slot = self.adam.get(layer)
        if slot is None:
            raise ProtocolError(f"server {self.rank} is not the matrix shard of layer {layer}")
        if frame.iteration != slot.iteration:
            raise StaleUpdateError(f"layer {layer}: SF push for iteration {frame.iteration}, "
                                   f"shard is at {slot.iteration}")
        if frame.origin in slot.pending:
            raise ProtocolError(f"layer {layer}: duplicate SF push from worker {frame.origin}")
        slot.pending[frame.origin] = decode_payload(frame.payload, layer, frame.iteration, frame.origin)
        if len(slot.pending) < self.n_workers:
            return
        for origin in sorted(slot.pending):
            b = slot.pending[origin]
            slot.weights += b.u.T @ b.v
        self._send_all(Frame(MsgType.BROADCAST_CHUNK, layer, adam_chunk_id(layer), slot.iteration, self.rank,
                             slot.weights.astype("<f4", copy=False).tobytes()))
        slot.pending = {}
        slot.iteration += 1


class Node:
    """Routes a node's inbound frames to the roles it hosts."""

    def __init__(self, endpoint, worker: Worker | None = None, server: Server | None = None, control=None):
        self.endpoint = endpoint
        self.worker = worker
        self.server = server
        self.control = control
        endpoint.register(self.handle)

    def handle(self, frame: Frame, src: int) -> None:
        mt = frame.msg_type
        if mt is MsgType.CONTROL:
            if self.control is None:
                raise ProtocolError("unexpected control frame")
            self.control(frame, src)
        elif mt in (MsgType.PUSH_CHUNK, MsgType.ONEBIT_PUSH_CHUNK):
            self._need(self.server, "push").on_push(frame)
        elif mt is MsgType.SF_BATCH and frame.chunk_id & ADAM_FLAG:
            self._need(self.server, "SF push").on_adam_batch(frame)
        elif mt is MsgType.SF_BATCH:
            self._need(self.worker, "SF batch").on_sf_batch(frame)
        elif mt is MsgType.BROADCAST_CHUNK:
            self._need(self.worker, "broadcast").on_broadcast(frame)
        else:
            raise ProtocolError(f"unhandled message type {mt!r}")

    @staticmethod
    def _need(role, what):
        if role is None:
            raise ProtocolError(f"{what} delivered to a node without that role")
        return role


# -- driver ----------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: list[float]
    snapshots: list[list[np.ndarray]]
    weights: list[list[np.ndarray]]  # final weights of every worker
    meter: TrafficMeter
    metrics: list[list[IterationMetrics]]
    book: InformationBook
    servers: list[Server] = field(default_factory=list)
    net: SimNetwork | None = None


def book_for(model: ModelSpec, cluster: ClusterConfig, plan=None) -> tuple[InformationBook, str]:
    """Book and mode name from a mode string, an explicit CommPlan, or None (hybrid)."""
    if plan is None or isinstance(plan, str):
        mode = plan or "hybrid"
        return bootstrap(model, cluster, mode), mode
    if isinstance(plan, CommPlan):
        book = bootstrap(model, cluster, "hybrid")
        routes = tuple(Route.SFB if s is Scheme.SFB else Route.PS for s in plan.schemes)
        chunks = partition(model, cluster, layers=chunked_layers(routes))
        return InformationBook(model, cluster, "custom", plan, routes, chunks, book.ports), "custom"
    raise TypeError(f"plan must be a mode name or CommPlan, not {type(plan).__name__}")


def default_dataset(model: ModelSpec, n_workers: int, seed: int) -> Dataset:
    n = max(64 * n_workers * model.batch_size // 8, 4 * n_workers * model.batch_size)
    return make_synthetic_dataset(seed, n, model.layers[0].cols, model.layers[-1].rows)


def train_distributed(model: ModelSpec, cluster: ClusterConfig, plan=None, epochs: int | None = None, *,
                      iterations: int | None = None, lr: float = 0.1, seed: int = 0,
                      data: Dataset | None = None, backend: str = "tcp", pool_size: int = 4,
                      sim: SimConfig | None = None, keep_snapshots: bool = False,
                      timeout: float | None = 60.0, straggler_timeout: float | None = None,
                      trace: bool = False, host: str = "127.0.0.1") -> TrainResult:
    """Train with every worker and shard of ``cluster`` inside this process.

    ``backend="tcp"`` wires the nodes over loopback sockets with one thread per
    worker; ``backend="sim"`` runs them in lock step on the simulated network.
    """
    book, mode = book_for(model, cluster, plan)
    data = data if data is not None else default_dataset(model, cluster.n_workers, seed)
    parts = [WorkerData(data, r, cluster.n_workers, model.batch_size, seed) for r in range(cluster.n_workers)]
    if iterations is None:
        iterations = (epochs or 1) * min(p.per_epoch for p in parts)
    initial = MLP(model, seed).weights
    schedule = schedule_for_mode(mode)
    n_nodes = len(cluster.nodes)
    meter = TrafficMeter()

    if backend == "sim":
        net = SimNetwork.from_config(n_nodes, sim or SimConfig(), meter=meter)
        endpoints = [SimEndpoint(net, i) for i in range(n_nodes)]
    elif backend == "tcp":
        net = None
        addrs = [(host, 0)] * n_nodes
        endpoints = [TcpTransport(i, addrs, meter=meter) for i in range(n_nodes)]
        for ep in endpoints:
            ep.start()
    else:
        raise ValueError(f"unknown backend {backend!r}")

    workers = [Worker(book, r, endpoints[cluster.node_of_worker(r)], parts[r], lr=lr, seed=seed,
                      schedule=schedule, pool_size=pool_size, timeout=timeout)
               for r in range(cluster.n_workers)]
    servers = [Server(book, r, endpoints[cluster.node_of_server(r)], initial,
                      straggler_timeout=straggler_timeout) for r in range(cluster.n_servers)]
    if trace:
        for s in servers:
            s.shard.trace = []
    for i, ep in enumerate(endpoints):
        Node(ep, next((w for w in workers if w.node == i), None), next((s for s in servers if s.node == i), None))

    losses: list[float] = []
    snapshots: list[list[np.ndarray]] = []
    try:
        if backend == "sim":
            _drive_sim(workers, iterations, losses, snapshots, keep_snapshots)
        else:
            _drive_threads(workers, endpoints, iterations, losses, snapshots, keep_snapshots)
    finally:
        for w in workers:
            w.close()
        for ep in endpoints:
            ep.close()
    return TrainResult(losses, snapshots, [w.net.weights for w in workers], meter,
                       [w.metrics for w in workers], book, servers, net)


def _drive_sim(workers, iterations, losses, snapshots, keep) -> None:
    for t in range(iterations):
        t0 = time.perf_counter()
        before = [w._bytes() for w in workers]
        step_loss = []
        grads_all = []
        for w in workers:
            w.begin(t)
            loss, grads, _ = w.compute_and_send(t)
            step_loss.append(loss)
            grads_all.append(grads)
        t1 = time.perf_counter()
        for w, grads in zip(workers, grads_all):
            if w.schedule == "sequential":
                w.sync_out_all(grads)
        for w in workers:
            w.sync_in_all()
        t2 = time.perf_counter()
        for w, loss, (bi, bo) in zip(workers, step_loss, before):
            w.record(t, loss, t0, t1, t2, bi, bo)
        losses.append(float(np.mean(step_loss)))
        if keep:
            snapshots.append([x.copy() for x in workers[0].net.weights])


def _drive_threads(workers, endpoints, iterations, losses, snapshots, keep) -> None:
    barrier = threading.Barrier(len(workers) + 1)
    step_loss = [0.0] * len(workers)
    failures: list[BaseException] = []

    def loop(w: Worker):
        try:
            for t in range(iterations):
                step_loss[w.rank] = w.run_iteration(t)
                barrier.wait()  # the driver records the iteration
                barrier.wait()
        except BaseException as e:  # noqa: BLE001 - reported by the driver
            failures.append(e)
            barrier.abort()

    threads = [threading.Thread(target=loop, args=(w,), daemon=True, name=f"worker{w.rank}") for w in workers]
    for th in threads:
        th.start()
    try:
        for _ in range(iterations):
            barrier.wait()
            losses.append(float(np.mean(step_loss)))
            if keep:
                snapshots.append([x.copy() for x in workers[0].net.weights])
            barrier.wait()
    except threading.BrokenBarrierError:
        pass
    for th in threads:
        th.join()
    errs = failures + [e for ep in endpoints for e in ep.errors]
    if errs:
        raise errs[0]


# -- multi-process launch ------------------------------------------------------------

_BOOK, _READY, _START, _DONE, _SHUTDOWN = b"book", b"ready", b"start", b"done", b"shutdown"


def _control(kind: bytes, body: bytes = b"") -> Frame:
    return Frame(MsgType.CONTROL, payload=kind + b"\n" + body)


def _split(frame: Frame) -> tuple[bytes, bytes]:
    kind, _, body = frame.payload.partition(b"\n")
    return kind, body


def launch_node(model: ModelSpec, cluster: ClusterConfig, node: int, *, base_port: int,
                mode: str = "hybrid", train_cfg: dict | None = None, timeout: float = 60.0) -> TrainResult | None:
    """Run one node of a multi-process job; node 0 (worker rank 0) is the coordinator.

    The coordinator ships the book and the training settings to every node,
    waits for all of them to confirm an identical book, then starts training.
    Returns the local worker's result, or None for a server-only node.
    """
    ports = assign_ports(cluster, base_port)
    endpoints = [ports[ep] for ep in cluster.nodes]
    ep = TcpTransport(node, list(endpoints), connect_timeout=timeout).start()
    inbox: dict[bytes, dict[int, bytes]] = {}

    def control(frame: Frame, src: int) -> None:
        kind, body = _split(frame)
        inbox.setdefault(kind, {})[src] = body

    node_obj = Node(ep, control=control)
    others = [i for i in range(len(endpoints)) if i != node]
    worker_nodes = {cluster.node_of_worker(r) for r in range(cluster.n_workers)}
    losses: list[float] = []
    try:
        with ep.cond:
            if node == 0:
                book = bootstrap(model, cluster, mode, base_port)
                cfg = dict(train_cfg or {})
                body = json.dumps(cfg).encode() + b"\n" + book.to_bytes()
                for o in others:
                    ep.send_frame(node, o, _control(_BOOK, body))
            else:
                ep.wait_until(lambda: 0 in inbox.get(_BOOK, {}), timeout)
                cfg_raw, _, raw = inbox[_BOOK][0].partition(b"\n")
                cfg = json.loads(cfg_raw)
                book = InformationBook.from_bytes(raw)
                if book.endpoints != endpoints:
                    raise ProtocolError("coordinator's port map disagrees with the local one")
            node_obj.worker, node_obj.server = _build_roles(book, node, ep, cfg)
            if node == 0:
                try:
                    ep.wait_until(lambda: len(inbox.get(_READY, {})) == len(others), timeout)
                except TimeoutError:
                    missing = sorted(set(others) - set(inbox.get(_READY, {})))
                    raise TimeoutError(f"nodes never confirmed the book: "
                                       f"{[cluster.nodes[m] for m in missing]}") from None
                bad = [o for o, d in inbox[_READY].items() if d.decode() != book.digest()]
                if bad:
                    raise ProtocolError(f"book mismatch on nodes {bad}")
                for o in others:
                    ep.send_frame(node, o, _control(_START))
            else:
                ep.send_frame(node, 0, _control(_READY, book.digest().encode()))
                ep.wait_until(lambda: 0 in inbox.get(_START, {}), None)
        worker = node_obj.worker
        if worker is not None:
            for t in range(cfg["iterations"]):
                losses.append(worker.run_iteration(t))
            worker.close()
        with ep.cond:
            if node == 0:
                waiting = worker_nodes - {0}
                ep.wait_until(lambda: waiting <= set(inbox.get(_DONE, {})), None)
                for o in others:
                    ep.send_frame(node, o, _control(_SHUTDOWN))
            else:
                if node in worker_nodes:
                    ep.send_frame(node, 0, _control(_DONE))
                ep.wait_until(lambda: 0 in inbox.get(_SHUTDOWN, {}), None)
    finally:
        ep.close()
    w = node_obj.worker
    if w is None:
        return None
    return TrainResult(losses, [], [w.net.weights], ep.meter, [w.metrics], book,
                       [node_obj.server] if node_obj.server else [])


def _build_roles(book: InformationBook, node: int, ep, cfg: dict) -> tuple[Worker | None, Server | None]:
    cluster, model = book.cluster, book.model
    seed = cfg.get("seed", 0)
    server = worker = None
    srv = [r for r in range(cluster.n_servers) if cluster.node_of_server(r) == node]
    if srv:
        server = Server(book, srv[0], ep, MLP(model, seed).weights,
                        straggler_timeout=cfg.get("straggler_timeout"))
    wr = [r for r in range(cluster.n_workers) if cluster.node_of_worker(r) == node]
    if wr:
        data = (parse_dataset_arg(cfg["dataset"], seed) if cfg.get("dataset")
                else default_dataset(model, cluster.n_workers, seed))
        part = WorkerData(data, wr[0], cluster.n_workers, model.batch_size, seed)
        worker = Worker(book, wr[0], ep, part, lr=cfg.get("lr", 0.1), seed=seed,
                        schedule=schedule_for_mode(book.mode), timeout=cfg.get("timeout", 60.0))
    return worker, server
