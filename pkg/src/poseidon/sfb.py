"""Sufficient factors: representation, wire payload, broadcast and reconstruction.

For a fully-connected layer ``y = W x`` the per-sample weight gradient is the
outer product ``u v^T`` of the gradient w.r.t. the layer output (``u``, length
M) and the layer input (``v``, length N).  A batch of K samples is therefore
carried by K pairs instead of an M x N matrix.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError
from .planner import CommPlan, Scheme
from .transport.frame import Frame, MsgType

_SF_HEAD = struct.Struct("<III")


@dataclass(frozen=True)
class SufficientFactor:
    u: np.ndarray
    v: np.ndarray
    sample_id: int


@dataclass
class SFBatch:
    layer: int
    iteration: int
    origin: int
    u: np.ndarray  # (K, M)
    v: np.ndarray  # (K, N)

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.u.shape[0] != self.v.shape[0]:
            raise ValueError(f"SF shapes {self.u.shape} / {self.v.shape} are inconsistent")

    @property
    def K(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[1], self.v.shape[1]

    @property
    def factors(self) -> list[SufficientFactor]:
        return [SufficientFactor(self.u[k], self.v[k], k) for k in range(self.K)]

    @property
    def elements(self) -> int:
        return self.K * (self.u.shape[1] + self.v.shape[1])

    @classmethod
    def from_factors(cls, layer: int, iteration: int, origin: int, factors) -> "SFBatch":
        factors = sorted(factors, key=lambda f: f.sample_id)
        return cls(layer, iteration, origin,
                   np.stack([f.u for f in factors]), np.stack([f.v for f in factors]))


def reconstruct(batch: SFBatch, shape: tuple[int, int] | None = None) -> np.ndarray:
    """``sum_k u_k v_k^T`` as an M x N matrix."""
    if shape is not None and tuple(shape) != batch.shape:
        raise ValueError(f"SF batch is {batch.shape}, layer expects {tuple(shape)}")
    return batch.u.T @ batch.v


def encode_payload(batch: SFBatch) -> bytes:
    K, (M, N) = batch.K, batch.shape
    body = np.concatenate([batch.u, batch.v], axis=1).astype("<f4", copy=False)
    return _SF_HEAD.pack(K, M, N) + body.tobytes()


def decode_payload(payload: bytes, layer: int, iteration: int, origin: int) -> SFBatch:
    if len(payload) < _SF_HEAD.size:
        raise ProtocolError("SF payload shorter than its header")
    K, M, N = _SF_HEAD.unpack_from(payload)
    expect = _SF_HEAD.size + 4 * K * (M + N)
    if len(payload) != expect:
        raise ProtocolError(f"SF payload is {len(payload)} bytes, header implies {expect}")
    body = np.frombuffer(payload, dtype="<f4", offset=_SF_HEAD.size).reshape(K, M + N)
    return SFBatch(layer, iteration, origin, body[:, :M].astype(np.float32), body[:, M:].astype(np.float32))


def payload_size(K: int, M: int, N: int) -> int:
    return _SF_HEAD.size + 4 * K * (M + N)


def broadcast(batch: SFBatch, peers, endpoint, *, src: int, plan: CommPlan | None = None) -> list:
    """Send ``batch`` once to every peer node; returns the transport's send records."""
    if plan is not None and plan.scheme_of(batch.layer) is not Scheme.SFB:
        raise ProtocolError(f"layer {batch.layer} is not synchronized by SFB")
    peers = list(peers)
    if not peers:
        return []
    frame = Frame(MsgType.SF_BATCH, batch.layer, 0, batch.iteration, batch.origin, encode_payload(batch))
    return [endpoint.send_frame(src, p, frame) for p in peers]


class SFInbox:
    """Per-layer record of which origins' batches were applied for the current iteration."""

    def __init__(self, layer: int, shape: tuple[int, int]):
        self.layer = layer
        self.shape = tuple(shape)
        self.iteration = 0
        self.applied: set[int] = set()

    def advance(self, iteration: int) -> None:
        self.iteration = iteration
        self.applied = set()

    def apply_remote(self, batch: SFBatch, params: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """``params += scale * reconstruct(batch)`` in place; rejects duplicates and stale batches."""
        if batch.layer != self.layer:
            raise ProtocolError(f"batch for layer {batch.layer} delivered to layer {self.layer}")
        if batch.iteration != self.iteration:
            raise ProtocolError(f"batch iteration {batch.iteration} != current {self.iteration}")
        if batch.origin in self.applied:
            raise ProtocolError(f"duplicate SF batch from origin {batch.origin} "
                                f"(layer {batch.layer}, iteration {batch.iteration})")
        g = reconstruct(batch, self.shape)
        if scale != 1.0:
            g = g * np.float32(scale)
        params += g
        self.applied.add(batch.origin)
        return params
