#!/usr/bin/env python3
"""Benchmark the numba kernel lane against the pure-numpy lane.

Times the fused attention core and layer norm (forward and backward) at a few
problem sizes, checks both lanes agree, and prints speedups. Run directly:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import sys
from pathlib import Path
from timeit import default_timer as timer

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from visaid import backend  # noqa: E402

SIZES = [
    # (heads, queries, keys, head_dim)
    (2, 8, 8, 16),
    (4, 24, 24, 16),
    (8, 50, 58, 64),
]


def time_call(fn, args, repeats):
    fn(*args)  # warmup (and jit compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = timer()
        fn(*args)
        best = min(best, timer() - t0)
    return best


def bench(repeats: int):
    numba = backend.numba_lane()
    if numba is None:
        print("numba unavailable; nothing to compare")
        return
    numpy_lane = backend.IMPLEMENTATIONS["numpy"]
    rng = np.random.default_rng(0)
    scale = 0.25

    header = f"{'kernel':<28}{'size':<18}{'numpy':>12}{'numba':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for heads, n, m, dh in SIZES:
        q = rng.normal(size=(heads, n, dh))
        k = rng.normal(size=(heads, m, dh))
        v = rng.normal(size=(heads, m, dh))
        mask = np.tril(np.ones((n, m), dtype=bool))
        size = f"H{heads} {n}x{m}x{dh}"

        ctx_np, attn_np = numpy_lane["attn_core_forward"](q, k, v, mask, scale)
        ctx_nb, attn_nb = numba["attn_core_forward"](q, k, v, mask, scale)
        assert np.allclose(ctx_np, ctx_nb, atol=1e-12)

        t_np = time_call(numpy_lane["attn_core_forward"], (q, k, v, mask, scale), repeats)
        t_nb = time_call(numba["attn_core_forward"], (q, k, v, mask, scale), repeats)
        print(f"{'attn_core_forward':<28}{size:<18}{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.2f}x")

        dctx = rng.normal(size=ctx_np.shape)
        g_np = numpy_lane["attn_core_backward"](dctx, q, k, v, attn_np, scale)
        g_nb = numba["attn_core_backward"](dctx, q, k, v, attn_nb, scale)
        assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(g_np, g_nb))
        t_np = time_call(numpy_lane["attn_core_backward"], (dctx, q, k, v, attn_np, scale), repeats)
        t_nb = time_call(numba["attn_core_backward"], (dctx, q, k, v, attn_nb, scale), repeats)
        print(f"{'attn_core_backward':<28}{size:<18}{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.2f}x")

        x = rng.normal(size=(n, heads * dh))
        gain = rng.normal(size=heads * dh)
        bias = rng.normal(size=heads * dh)
        y_np, mean_np, rstd_np = numpy_lane["layer_norm_forward"](x, gain, bias, 1e-5)
        y_nb, _, _ = numba["layer_norm_forward"](x, gain, bias, 1e-5)
        assert np.allclose(y_np, y_nb, atol=1e-12)
        t_np = time_call(numpy_lane["layer_norm_forward"], (x, gain, bias, 1e-5), repeats)
        t_nb = time_call(numba["layer_norm_forward"], (x, gain, bias, 1e-5), repeats)
        print(f"{'layer_norm_forward':<28}{size:<18}{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.2f}x")

        dy = rng.normal(size=x.shape)
        t_np = time_call(numpy_lane["layer_norm_backward"], (dy, x, gain, mean_np, rstd_np), repeats)
        t_nb = time_call(numba["layer_norm_backward"], (dy, x, gain, mean_np, rstd_np), repeats)
        print(f"{'layer_norm_backward':<28}{size:<18}{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.2f}x")
    print(f"\nactive lane for library code: {backend.active_lane()}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    bench(ap.parse_args().repeats)
