"""Hot numeric kernels with a pure-numpy fallback.

Numba is used when importable unless ``POSEIDON_NUMBA=0`` is set in the
environment before import.  Both paths implement identical algorithms; the
fallback is also what the tests compare the JIT path against.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("POSEIDON_NUMBA", "1").strip().lower() in ("0", "false", "no", "off")

try:
    if _DISABLED:
        raise ImportError("disabled by POSEIDON_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# -- max-min fair rate allocation --------------------------------------------

def maxmin_rates_numpy(src, dst, egress, ingress):
    """Progressive filling over per-node egress and ingress capacities.

    Every flow ``i`` crosses two resources: ``egress[src[i]]`` and
    ``ingress[dst[i]]``.  Returns the max-min fair rate of each flow.
    """
    n_flows = src.shape[0]
    n_nodes = egress.shape[0]
    rates = np.zeros(n_flows)
    if n_flows == 0:
        return rates
    rem = np.concatenate([egress, ingress]).astype(np.float64)
    res_a = src.astype(np.int64)
    res_b = dst.astype(np.int64) + n_nodes
    active = np.ones(n_flows, dtype=bool)
    while active.any():
        counts = np.bincount(res_a[active], minlength=2 * n_nodes) + \
            np.bincount(res_b[active], minlength=2 * n_nodes)
        used = counts > 0
        share = np.full(2 * n_nodes, np.inf)
        share[used] = rem[used] / counts[used]
        s = share.min()
        if not np.isfinite(s):
            rates[active] = np.inf
            break
        bottleneck = used & (share <= s)
        hit = active & (bottleneck[res_a] | bottleneck[res_b])
        rates[hit] = s
        np.subtract.at(rem, res_a[hit], s)
        np.subtract.at(rem, res_b[hit], s)
        np.maximum(rem, 0.0, out=rem)
        active &= ~hit
    return rates


def _maxmin_rates_loop(src, dst, egress, ingress):
    n_flows = src.shape[0]
    n_nodes = egress.shape[0]
    n_res = 2 * n_nodes
    rates = np.zeros(n_flows)
    if n_flows == 0:
        return rates
    rem = np.empty(n_res)
    for k in range(n_nodes):
        rem[k] = egress[k]
        rem[n_nodes + k] = ingress[k]
    active = np.ones(n_flows, dtype=np.bool_)
    counts = np.zeros(n_res, dtype=np.int64)
    hit = np.zeros(n_flows, dtype=np.bool_)
    left = n_flows
    while left > 0:
        counts[:] = 0
        for i in range(n_flows):
            if active[i]:
                counts[src[i]] += 1
                counts[n_nodes + dst[i]] += 1
        s = np.inf
        for r in range(n_res):
            if counts[r] > 0:
                v = rem[r] / counts[r]
                if v < s:
                    s = v
        if s == np.inf:
            for i in range(n_flows):
                if active[i]:
                    rates[i] = np.inf
            break
        hit[:] = False
        for i in range(n_flows):
            if not active[i]:
                continue
            a = src[i]
            b = n_nodes + dst[i]
            if rem[a] / counts[a] <= s or rem[b] / counts[b] <= s:
                hit[i] = True
        # subtract after the scan so every bottleneck test sees the same shares
        for i in range(n_flows):
            if hit[i]:
                rates[i] = s
                a = src[i]
                b = n_nodes + dst[i]
                rem[a] = max(rem[a] - s, 0.0)
                rem[b] = max(rem[b] - s, 0.0)
                active[i] = False
                left -= 1
    return rates


# -- 1-bit quantization ------------------------------------------------------

def onebit_quantize_numpy(x):
    """Sign bits plus per-column reconstruction values.

    Threshold is zero: entries ``> 0`` map to the column mean of the positive
    entries, the rest to the column mean of the non-positive entries.
    """
    pos = x > 0
    n_pos = pos.sum(axis=0)
    n_neg = x.shape[0] - n_pos
    sum_pos = np.where(pos, x, 0.0).sum(axis=0)
    sum_neg = np.where(pos, 0.0, x).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_pos = np.where(n_pos > 0, sum_pos / np.maximum(n_pos, 1), 0.0)
        mean_neg = np.where(n_neg > 0, sum_neg / np.maximum(n_neg, 1), 0.0)
    return pos.astype(np.uint8), mean_pos.astype(x.dtype), mean_neg.astype(x.dtype)


def _onebit_quantize_loop(x):
    m, n = x.shape
    bits = np.zeros((m, n), dtype=np.uint8)
    mean_pos = np.zeros(n, dtype=x.dtype)
    mean_neg = np.zeros(n, dtype=x.dtype)
    for j in range(n):
        sp = 0.0
        sn = 0.0
        cp = 0
        for i in range(m):
            v = x[i, j]
            if v > 0:
                bits[i, j] = 1
                sp += v
                cp += 1
            else:
                sn += v
        if cp > 0:
            mean_pos[j] = sp / cp
        if cp < m:
            mean_neg[j] = sn / (m - cp)
    return bits, mean_pos, mean_neg


def onebit_dequantize_numpy(bits, mean_pos, mean_neg):
    return np.where(bits.astype(bool), mean_pos[None, :], mean_neg[None, :])


def _onebit_dequantize_loop(bits, mean_pos, mean_neg):
    m, n = bits.shape
    out = np.empty((m, n), dtype=mean_pos.dtype)
    for i in range(m):
        for j in range(n):
            out[i, j] = mean_pos[j] if bits[i, j] else mean_neg[j]
    return out


if HAS_NUMBA:
    maxmin_rates = njit(cache=True)(_maxmin_rates_loop)
    onebit_quantize = njit(cache=True)(_onebit_quantize_loop)
    onebit_dequantize = njit(cache=True)(_onebit_dequantize_loop)
else:
    maxmin_rates = maxmin_rates_numpy
    onebit_quantize = onebit_quantize_numpy
    onebit_dequantize = onebit_dequantize_numpy

BACKEND = "numba" if HAS_NUMBA else "numpy"
