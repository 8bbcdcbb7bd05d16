"""Sharded bulk-synchronous parameter server.

Parameters of PS-synchronized layers are cut into chunks of at most
``chunk_bytes`` (a chunk never spans two layers) and dealt out to the server
shards so that counts and bytes stay level.  A shard adds every worker's delta into the chunk and releases
the fresh values once all live workers have reported for that iteration.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProtocolError, StaleUpdateError
from .modelspec import ELEMENT_BYTES, ClusterConfig, ModelSpec, flatten_offsets
from .planner import CommPlan, Scheme

SNAPSHOT_MAGIC = b"PSDN"
SNAPSHOT_VERSION = 1
_SNAP_HEAD = struct.Struct("<4sII")
_SNAP_CHUNK = struct.Struct("<QQQQ")


@dataclass(frozen=True)
class ChunkInfo:
    chunk_id: int
    layer: int
    start: int  # offset in the global flattened parameter vector
    length: int
    server: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class ChunkTable:
    chunks: tuple[ChunkInfo, ...]
    n_servers: int

    @property
    def assignment(self) -> dict[int, int]:
        """ShardAssignment: chunk_id -> server index."""
        return {c.chunk_id: c.server for c in self.chunks}

    def of_layer(self, layer: int) -> list[ChunkInfo]:
        return [c for c in self.chunks if c.layer == layer]

    def of_server(self, server: int) -> list[ChunkInfo]:
        return [c for c in self.chunks if c.server == server]

    def __getitem__(self, chunk_id: int) -> ChunkInfo:
        return self.chunks[chunk_id]

    def __len__(self) -> int:
        return len(self.chunks)

    def server_loads(self) -> list[int]:
        """Assigned bytes per server."""
        loads = [0] * self.n_servers
        for c in self.chunks:
            loads[c.server] += c.length * ELEMENT_BYTES
        return loads


def partition(model: ModelSpec, cluster: ClusterConfig, plan: CommPlan | None = None,
              layers=None) -> ChunkTable:
    """Chunk the PS layers (all layers when no plan is given) and deal them to the servers.

    ``layers`` overrides the plan with an explicit set of layer indices to chunk.
    """
    if layers is None:
        layers = {l.index for l in model.layers
                  if plan is None or plan.scheme_of(l.index) is Scheme.PS}
    cap = cluster.chunk_elements
    pieces = []  # (layer, start, length)
    for layer, rng in zip(model.layers, flatten_offsets(model)):
        if layer.index not in layers:
            continue
        for off in range(0, rng.length, cap):
            pieces.append((layer.index, rng.start + off, min(cap, rng.length - off)))
    owner = _deal(np.array([p[2] for p in pieces], np.int64), cluster.n_servers)
    chunks = tuple(ChunkInfo(cid, l, s, n, int(owner[cid])) for cid, (l, s, n) in enumerate(pieces))
    return ChunkTable(chunks, cluster.n_servers)


def _deal(lengths: np.ndarray, n_servers: int) -> np.ndarray:
    """Server per chunk, dealt in rounds of ``n_servers``.

    Within a round the longest chunk goes to the least-loaded server, so chunk
    counts differ by at most one and loads by at most one chunk.  With equal
    lengths this is plain round-robin.
    """
    owner = np.empty(len(lengths), np.int64)
    load = np.zeros(n_servers, np.int64)
    for lo in range(0, len(lengths), n_servers):
        ids = lo + np.argsort(-lengths[lo:lo + n_servers], kind="stable")
        servers = np.lexsort((np.arange(n_servers), load))[:len(ids)]
        owner[ids] = servers
        load[servers] += lengths[ids]
    return owner


@dataclass
class KVChunk:
    chunk_id: int
    start: int
    length: int
    values: np.ndarray
    iteration: int = 0
    update_count: int = 0
    applied: set = field(default_factory=set)
    dropped: set = field(default_factory=set)


@dataclass(frozen=True)
class BroadcastMsg:
    chunk_id: int
    iteration: int  # iteration whose updates the values include
    values: np.ndarray


class KVShard:
    """One server's chunks; callers serialize access (one logical event loop per shard)."""

    def __init__(self, chunks: list[ChunkInfo], initial: np.ndarray | None, n_workers: int):
        self.n_workers = n_workers
        self.chunks: dict[int, KVChunk] = {}
        self.dropped_history: set[tuple[int, int]] = set()  # (origin, iteration)
        self.trace: list[tuple] | None = None
        for c in chunks:
            self.add_chunk(c.chunk_id, c.start, c.length,
                           None if initial is None else initial[c.start:c.stop])

    def add_chunk(self, chunk_id: int, start: int, length: int, values: np.ndarray | None = None) -> None:
        vals = np.zeros(length, np.float32) if values is None else np.array(values, np.float32).reshape(-1)
        if vals.shape[0] != length:
            raise ValueError(f"chunk {chunk_id}: {vals.shape[0]} initial values for length {length}")
        self.chunks[chunk_id] = KVChunk(chunk_id, start, length, vals)

    def live_workers(self, chunk: KVChunk) -> int:
        return self.n_workers - len(chunk.dropped)

    def receive_update(self, chunk_id: int, iteration: int, delta: np.ndarray, origin: int) -> bool:
        """Add ``delta`` into the chunk. Returns False if the update was discarded (straggler)."""
        chunk = self.chunks[chunk_id]
        if (origin, iteration) in self.dropped_history:
            return False
        if iteration != chunk.iteration:
            raise StaleUpdateError(
                f"chunk {chunk_id}: update for iteration {iteration}, chunk is at {chunk.iteration}")
        if delta.shape[0] != chunk.length:
            raise ProtocolError(f"chunk {chunk_id}: delta length {delta.shape[0]} != {chunk.length}")
        if origin in chunk.applied:
            raise ProtocolError(f"chunk {chunk_id}: duplicate update from worker {origin}")
        chunk.values += delta
        chunk.applied.add(origin)
        chunk.update_count += 1
        if self.trace is not None:
            self.trace.append(("apply", chunk_id, iteration, origin))
        return True

    def drop_worker(self, chunk_id: int, origin: int) -> None:
        """Exclude ``origin`` from the chunk's current iteration (straggler dropping)."""
        chunk = self.chunks[chunk_id]
        if origin in chunk.applied:
            return
        chunk.dropped.add(origin)
        self.dropped_history.add((origin, chunk.iteration))

    def missing(self, chunk_id: int, workers) -> list[int]:
        chunk = self.chunks[chunk_id]
        return [w for w in workers if w not in chunk.applied and w not in chunk.dropped]

    def maybe_broadcast(self, chunk_id: int) -> BroadcastMsg | None:
        chunk = self.chunks[chunk_id]
        if chunk.update_count < self.live_workers(chunk):
            return None
        if self.trace is not None:
            self.trace.append(("broadcast", chunk_id, chunk.iteration, frozenset(chunk.applied)))
        msg = BroadcastMsg(chunk_id, chunk.iteration, chunk.values.copy())
        chunk.update_count = 0
        chunk.applied = set()
        chunk.dropped = set()
        chunk.iteration += 1
        return msg

    # -- checkpointing -------------------------------------------------------

    def checkpoint(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(_SNAP_HEAD.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(self.chunks)))
            for cid in sorted(self.chunks):
                c = self.chunks[cid]
                f.write(_SNAP_CHUNK.pack(c.chunk_id, c.start, c.length, c.iteration))
                f.write(c.values.astype("<f4", copy=False).tobytes())

    def restore(self, path: str | Path) -> None:
        """Load a snapshot; every chunk must match this shard's ranges."""
        snap = read_snapshot(path)
        if set(snap) != set(self.chunks):
            raise ValueError(f"snapshot chunks {sorted(snap)} != shard chunks {sorted(self.chunks)}")
        for cid, (start, length, iteration, values) in snap.items():
            c = self.chunks[cid]
            if (start, length) != (c.start, c.length):
                raise ValueError(f"chunk {cid}: snapshot range ({start},{length}) != ({c.start},{c.length})")
        for cid, (_, _, iteration, values) in snap.items():
            c = self.chunks[cid]
            c.values = values.copy()
            c.iteration = iteration
            c.update_count = 0
            c.applied = set()
            c.dropped = set()


def read_snapshot(path: str | Path) -> dict[int, tuple[int, int, int, np.ndarray]]:
    data = Path(path).read_bytes()
    magic, version, count = _SNAP_HEAD.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a snapshot file")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos = _SNAP_HEAD.size
    out = {}
    for _ in range(count):
        cid, start, length, iteration = _SNAP_CHUNK.unpack_from(data, pos)
        pos += _SNAP_CHUNK.size
        values = np.frombuffer(data, dtype="<f4", count=length, offset=pos).astype(np.float32)
        pos += 4 * length
        out[cid] = (start, length, iteration, values)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
