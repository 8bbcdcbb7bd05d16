"""Time the JIT kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The JIT path is compiled (or loaded from cache) before timing.
"""
import argparse
import time

import numpy as np

from poseidon import _kernels as k


def best_of(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def flows(n_nodes, n_flows, rng):
    src = rng.integers(0, n_nodes, n_flows)
    dst = (src + rng.integers(1, n_nodes, n_flows)) % n_nodes
    cap = np.full(n_nodes, 1.25e8)
    return src.astype(np.int64), dst.astype(np.int64), cap, cap.copy()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not k.HAS_NUMBA:
        print("numba unavailable or disabled; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    cases = [
        ("maxmin 16 nodes / 240 flows", k.maxmin_rates_numpy, k.maxmin_rates, flows(16, 240, rng)),
        ("maxmin 64 nodes / 4032 flows", k.maxmin_rates_numpy, k.maxmin_rates, flows(64, 4032, rng)),
        ("1-bit quantize 1000x4096", k.onebit_quantize_numpy, k.onebit_quantize,
         (rng.standard_normal((1000, 4096)),)),
    ]
    bits, pos, neg = k.onebit_quantize_numpy(rng.standard_normal((1000, 4096)))
    cases.append(("1-bit dequantize 1000x4096", k.onebit_dequantize_numpy, k.onebit_dequantize,
                  (bits, pos.astype(np.float32), neg.astype(np.float32))))
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, ref, jit, a in cases:
        r_ref, r_jit = ref(*a), jit(*a)  # warm-up, and a sanity check that both paths agree
        for x, y in zip(np.atleast_1d(r_ref) if isinstance(r_ref, np.ndarray) else r_ref,
                        np.atleast_1d(r_jit) if isinstance(r_jit, np.ndarray) else r_jit):
            np.testing.assert_allclose(x, y, rtol=1e-9)
        t_ref, t_jit = best_of(ref, a, args.repeat), best_of(jit, a, args.repeat)
        print(f"{name:32s} {t_ref * 1e3:10.3f} {t_jit * 1e3:10.3f} {t_ref / t_jit:8.1f}x")


if __name__ == "__main__":
    main()
