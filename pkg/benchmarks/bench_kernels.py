"""Time the numba kernels against the numpy fallback on campaign-sized inputs.

    python benchmarks/bench_kernels.py --n 16 --repeat 20
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from shieldsim import kernels
from shieldsim.ecc import PARITY, cover_masks, data_positions, secded_encode


def cases(n: int, rng: np.random.Generator) -> dict:
    """Kernel name -> argument tuple; the array cases carry sparse random faults."""
    def sparse(shape, width):
        hit = rng.random(shape) < 0.01
        return np.where(hit, np.int64(1) << rng.integers(0, width, shape), 0).astype(np.int64)

    faults_int = (sparse((n, n, n), 8), sparse((n, n), 8), sparse((n, n), 8),
                  sparse((n, n, n), 32), sparse((n, n), 32), sparse((n, n), 32))
    faults_float = (sparse((n, n, n), 32),) + faults_int[1:]
    pos = np.array(data_positions(32), np.int64)
    covers = np.array(cover_masks(32), np.int64)
    width = secded_encode(0, 32).width
    data = rng.integers(0, 1 << 32, 4096, dtype=np.int64)
    cws = kernels.get_backend("numpy").secded_encode_batch(data, pos, covers, PARITY)
    return {
        "array_gemm_int": (rng.integers(0, 256, (n, n)).astype(np.int64),
                           rng.integers(-128, 128, (n, n)).astype(np.int64),
                           rng.integers(-2 ** 20, 2 ** 20, (n, n)).astype(np.int64), *faults_int, True),
        "array_gemm_float": (rng.normal(size=(n, n)).astype(np.float32).view(np.uint32).astype(np.int64),
                             rng.normal(size=(n, n)).astype(np.float32),
                             rng.normal(size=(n, n)).astype(np.float32), *faults_float, True),
        "masked_wrap_sums": (rng.integers(0, 1 << 32, (n, n)).astype(np.int64), 0xFF800000, 32),
        "secded_encode_batch": (data, pos, covers, PARITY),
        "secded_decode_batch": (cws ^ (np.int64(1) << rng.integers(0, width, cws.size)),
                                pos, covers, width - 1, PARITY),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=16, help="array side (16 for INT8-D, 128 for INT8-I)")
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    backends = {name: kernels.get_backend(name) for name in kernels.available_backends()}
    args_by_kernel = cases(args.n, np.random.default_rng(0))
    print(f"n={args.n}, best of {args.repeat} calls, microseconds per call")
    print(f"{'kernel':22s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, call_args in args_by_kernel.items():
        times = {}
        for bname, ns in backends.items():
            fn = getattr(ns, name)
            with np.errstate(all="ignore"):
                fn(*call_args)  # compile / warm caches
                times[bname] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
        line = f"{name:22s}" + "".join(f"{times[b] * 1e6:12.1f}" for b in backends)
        if len(times) == 2:
            line += f"{times['numpy'] / times['numba']:11.1f}x"
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
