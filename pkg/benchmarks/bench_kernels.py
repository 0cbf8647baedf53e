#!/usr/bin/env python3
"""Benchmark the numba-jitted conv kernels against the pure-numpy fallback.

Shapes match one training step of the default pipeline (batch 64, 32x32
images). Run directly: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from semise.kernels import numpy_impl
from semise.ndcore import Rng

try:
    from semise.kernels import numba_impl
except ImportError:
    numba_impl = None


def time_call(fn, *args, repeat=20):
    fn(*args)  # warm-up (also triggers JIT compilation)
    start = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - start) / repeat


def bench(name, numpy_fn, numba_fn, args):
    t_np = time_call(numpy_fn, *args)
    line = f"{name:22s} numpy {t_np * 1e3:8.3f} ms"
    if numba_fn is not None:
        t_nb = time_call(numba_fn, *args)
        line += f"   numba {t_nb * 1e3:8.3f} ms   speedup {t_np / t_nb:5.2f}x"
    print(line)


def main():
    rng = Rng(0)
    cases = [
        ("conv 1->8 @32", 64, 1, 8, 32),
        ("conv 8->16 @16", 64, 8, 16, 16),
        ("conv 16->32 @8", 64, 16, 32, 8),
    ]
    print(f"numba available: {numba_impl is not None}")
    for name, b, c, f, hw in cases:
        x = rng.normal(size=(b, c, hw, hw))
        w = rng.normal(size=(f, c, 3, 3))
        bias = rng.normal(size=f)
        y = numpy_impl.conv2d_forward(x, w, bias)
        dy = rng.normal(size=y.shape)
        bench(
            name + " fwd",
            numpy_impl.conv2d_forward,
            numba_impl.conv2d_forward if numba_impl else None,
            (x, w, bias),
        )
        bench(
            name + " bwd",
            numpy_impl.conv2d_backward,
            numba_impl.conv2d_backward if numba_impl else None,
            (x, w, dy),
        )
    for name, b, c, f, hw in [("convT 32->16 @4", 64, 32, 16, 4), ("convT 8->1 @16", 64, 8, 1, 16)]:
        x = rng.normal(size=(b, c, hw, hw))
        w = rng.normal(size=(c, f, 3, 3))
        bias = rng.normal(size=f)
        y = numpy_impl.convt2d_forward(x, w, bias)
        dy = rng.normal(size=y.shape)
        bench(
            name + " fwd",
            numpy_impl.convt2d_forward,
            numba_impl.convt2d_forward if numba_impl else None,
            (x, w, bias),
        )
        bench(
            name + " bwd",
            numpy_impl.convt2d_backward,
            numba_impl.convt2d_backward if numba_impl else None,
            (x, w, dy),
        )


if __name__ == "__main__":
    main()
