"""Time the compiled and numpy kernel backends on the same inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--threads T]
"""

import argparse
import timeit

import numpy as np

from inferkit.kernels import backends
from inferkit.quant import QuantScheme, quantize_matrix


def cases(rng):
    x1 = rng.standard_normal((1, 512)).astype(np.float32)
    x8 = rng.standard_normal((8, 512)).astype(np.float32)
    w = rng.standard_normal((512, 512)).astype(np.float32)
    scheme = QuantScheme("Q4", 32)
    qm = quantize_matrix(rng.standard_normal((512, 512)), scheme)
    lo, hi = qm.bounds64()
    qargs = (qm.packed, lo, hi, scheme.code_bits, scheme.pair, scheme.block_size)
    codes = rng.integers(0, 16, size=64 * 1024)

    def build(impl, threads):
        packed = impl.pack_codes(codes, 4)
        return {
            "matmul 1x512 @ 512x512": lambda: impl.matmul(x1, w, threads),
            "matmul 8x512 @ 512x512": lambda: impl.matmul(x8, w, threads),
            "matmul_quant Q4_B32 8x512": lambda: impl.matmul_quant(x8, *qargs, threads),
            "dequantize_rows Q4_B32 512x512": lambda: impl.dequantize_rows(*qargs),
            "pack_codes 64k x 4 bit": lambda: impl.pack_codes(codes, 4),
            "unpack_codes 64k x 4 bit": lambda: impl.unpack_codes(packed, 4, len(codes)),
        }

    return build


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    build = cases(np.random.default_rng(0))
    found = backends()
    timings = {}
    for name, impl in found.items():
        for label, fn in build(impl, args.threads).items():
            fn()
            number = 3
            timings.setdefault(label, {})[name] = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number

    names = list(found)
    print(f"threads: {args.threads}")
    header = f"{'kernel':34}" + "".join(f"{n + ' (ms)':>16}" for n in names)
    if "cython" in found:
        header += f"{'speedup':>10}"
    print(header)
    for label, row in timings.items():
        line = f"{label:34}" + "".join(f"{row[n] * 1e3:16.3f}" for n in names)
        if "cython" in found:
            line += f"{row['python'] / row['cython']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
