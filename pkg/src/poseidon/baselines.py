"""Comparison strategies: 1-bit quantized gradients with error feedback, and
the SF-push / full-matrix-pull routing of FC layers through one shard."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ProtocolError
from .planner import Role, adam_cost


@dataclass
class QuantState:
    """Per-layer quantization residual, zero at the start of training."""

    shape: tuple[int, int]
    residual: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.residual is None:
            self.residual = np.zeros(self.shape, dtype=np.float64)


@dataclass(frozen=True)
class QuantizedGrad:
    bits: np.ndarray  # uint8 (M, N), 1 where the value was quantized up
    pos: np.ndarray  # float32 (N,) reconstruction value of set bits, per column
    neg: np.ndarray  # float32 (N,) reconstruction value of clear bits, per column

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


def dequantize(q: QuantizedGrad) -> np.ndarray:
    return _kernels.onebit_dequantize(q.bits, q.pos, q.neg)


def quantize_1bit(grad: np.ndarray, state: QuantState) -> tuple[QuantizedGrad, np.ndarray]:
    """Quantize ``grad + residual`` to one bit per element and carry the error forward.

    The reconstruction values are sent as float32, and the residual is computed
    against exactly those values, so ``residual == (grad + old_residual) - dequantize(q)``.
    """
    if grad.shape != state.shape:
        raise ValueError(f"gradient shape {grad.shape} != state shape {state.shape}")
    x = grad.astype(np.float64) + state.residual
    bits, pos, neg = _kernels.onebit_quantize(np.ascontiguousarray(x))
    q = QuantizedGrad(bits, pos.astype(np.float32), neg.astype(np.float32))
    deq = dequantize(q).astype(np.float64)
    state.residual = x - deq
    return q, state.residual


_ONEBIT_HEAD = struct.Struct("<IQQ")  # n_cols, first element (layer-local), length


def encode_onebit_chunk(q: QuantizedGrad, start: int, length: int) -> bytes:
    """Wire payload for elements ``[start, start+length)`` of the row-major layer matrix."""
    n_cols = q.shape[1]
    bits = np.packbits(q.bits.reshape(-1)[start:start + length])
    return (_ONEBIT_HEAD.pack(n_cols, start, length) + q.pos.astype("<f4").tobytes()
            + q.neg.astype("<f4").tobytes() + bits.tobytes())


def decode_onebit_chunk(payload: bytes, expected_length: int) -> np.ndarray:
    """Dequantized float32 values of one chunk."""
    if len(payload) < _ONEBIT_HEAD.size:
        raise ProtocolError("1-bit payload shorter than its header")
    n_cols, start, length = _ONEBIT_HEAD.unpack_from(payload)
    if length != expected_length:
        raise ProtocolError(f"1-bit chunk carries {length} elements, chunk has {expected_length}")
    nbits = (length + 7) // 8
    expect = _ONEBIT_HEAD.size + 8 * n_cols + nbits
    if len(payload) != expect:
        raise ProtocolError(f"1-bit payload is {len(payload)} bytes, expected {expect}")
    off = _ONEBIT_HEAD.size
    pos = np.frombuffer(payload, "<f4", n_cols, off)
    neg = np.frombuffer(payload, "<f4", n_cols, off + 4 * n_cols)
    bits = np.unpackbits(np.frombuffer(payload, np.uint8, nbits, off + 8 * n_cols))[:length].astype(bool)
    cols = (start + np.arange(length)) % n_cols
    return np.where(bits, pos[cols], neg[cols]).astype(np.float32)


def onebit_payload_size(n_cols: int, length: int) -> int:
    return _ONEBIT_HEAD.size + 8 * n_cols + (length + 7) // 8


def adam_expected_elements(M: int, N: int, K: int, P1: int, colocated: bool = False) -> dict[str, int]:
    """Per-node elements moved by one FC layer under SF push / matrix pull.

    With a dedicated shard these are the cost-model rows for the shard and a worker.
    When the shard's node is also a worker, its own push and pull stay local.
    """
    if not colocated:
        return {"shard": adam_cost(M, N, K, P1, Role.SERVER_ONLY),
                "worker": adam_cost(M, N, K, P1, Role.WORKER_ONLY)}
    return {"shard": adam_cost(M, N, K, P1, Role.SERVER_AND_WORKER),
            "worker": adam_cost(M, N, K, P1, Role.WORKER_ONLY)}


def sequential_ps_sync(worker, grads) -> None:
    """Synchronize every layer only after the whole backward pass: all sends, then all receives."""
    worker.sync_out_all(grads)
    worker.sync_in_all()
