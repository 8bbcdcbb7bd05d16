from __future__ import annotations

import threading
from collections import defaultdict


class TrafficMeter:
    """Per-node, per-direction and per-layer byte counters.

    Frames a node sends to itself (a worker pushing to its own shard) do not
    cross the network interface; they are counted under ``loopback`` only.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_out: dict[int, int] = defaultdict(int)
        self.bytes_in: dict[int, int] = defaultdict(int)
        self.layer_bytes: dict[int, int] = defaultdict(int)
        self.node_layer_bytes: dict[tuple[int, int], int] = defaultdict(int)
        self.loopback: dict[int, int] = defaultdict(int)
        self.frames = 0

    def record(self, src: int, dst: int, nbytes: int, layer: int | None = None) -> None:
        with self._lock:
            self.frames += 1
            if src == dst:
                self.loopback[src] += nbytes
                return
            self.bytes_out[src] += nbytes
            self.bytes_in[dst] += nbytes
            if layer is not None:
                self.layer_bytes[layer] += nbytes
                self.node_layer_bytes[src, layer] += nbytes
                self.node_layer_bytes[dst, layer] += nbytes

    def total(self, node: int) -> int:
        return self.bytes_in[node] + self.bytes_out[node]

    def node_totals(self, nodes) -> dict[int, int]:
        return {n: self.total(n) for n in nodes}

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "bytes_in": dict(self.bytes_in),
                "bytes_out": dict(self.bytes_out),
                "layer_bytes": dict(self.layer_bytes),
                "loopback": dict(self.loopback),
                "frames": self.frames,
            }
